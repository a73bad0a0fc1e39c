"""Command-line entry point: ``oor <command> [flags]``.

Every successful command emits a run manifest (command, resolved config,
seed, input/output hashes, version). ``oor replay --manifest m.json --check``
re-runs a manifest and verifies that the outputs are byte-identical.
Exit codes: 0 success, 1 domain error (JSON on stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import subprocess
import sys
import time
from importlib import resources

import jsonschema
import numpy as np

from .errors import GraphInvalid, InsufficientSamples, OORError

# helpers ------------------------------------------------------------------

def _schema(name):
    return json.loads(resources.files("oor").joinpath("schemas", f"{name}.schema.json").read_text())


def validate(doc, name):
    jsonschema.validate(doc, _schema(name))
    return doc


def _sha256(data: bytes):
    return hashlib.sha256(data).hexdigest()


def _file_sha(path):
    with open(path, "rb") as fh:
        return _sha256(fh.read())


def _version():
    from . import __version__

    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _dump(doc):
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


class Run:
    """Collects outputs of one command so the manifest can hash them."""

    def __init__(self, args):
        self.args = args
        self.inputs = {}
        self.outputs = {}
        self.stdout = io.StringIO()

    def read(self, path):
        self.inputs[path] = _file_sha(path)
        return path

    def write(self, path, text):
        if path is None or path == "-":
            self.stdout.write(text)
            return
        with open(path, "w") as fh:
            fh.write(text)
        self.outputs[path] = _file_sha(path)

    def rng(self):
        return np.random.default_rng(self.args.seed)


# commands ----------------------------------------------------------------

def cmd_gen_data(run: Run):
    from .synthdata import dataset_records

    a = run.args
    with open(run.read(a.spec)) as fh:
        spec = json.load(fh)
    lines = []
    for rec in dataset_records(spec, run.rng()):
        lines.append(json.dumps(validate(rec, "sample_record")) + "\n")
    run.write(a.out, "".join(lines))


def cmd_train(run: Run):
    from .network import ContextVocab, NetConfig, NoiseSchedule, ScoreNet, TrainConfig, save_checkpoint, train
    from .synthdata import load_dataset

    a = run.args
    data = load_dataset(run.read(a.data))
    if not data:
        raise OORError("dataset is empty")
    vocab = ContextVocab(sorted({tuple(c) for _, c in data}))
    sched = NoiseSchedule(a.sigma_min, a.sigma_max, a.epsilon)
    net_cfg = NetConfig(hidden=a.hidden, depth=a.depth, precond=a.precond, sigma_data=a.sigma_data)
    net = ScoreNet(vocab, net_cfg, sched, seed=a.seed)
    cfg = TrainConfig(batch_size=a.batch_size, lr=a.lr, epochs=a.epochs, seed=a.seed, schedule=sched,
                      lr_final=a.lr_final, holdout=a.holdout)
    log = None
    if a.verbose:
        def log(epoch, loss):
            print(json.dumps({"epoch": epoch, "loss": loss}), file=sys.stderr)
    train(net, data, cfg, log)
    out = a.out
    save_checkpoint(net, out)
    run.outputs[out] = _file_sha(out)


def _load_net(run, path):
    from .network import load_checkpoint

    return load_checkpoint(run.read(path))


def _sample_lines(samples, triple):
    from .synthdata import state_record

    return "".join(json.dumps(validate(state_record(s.to_state(), triple), "sample_record")) + "\n"
                   for s in samples)


def cmd_sample(run: Run):
    from .sampler import sample_pairwise

    a = run.args
    net = _load_net(run, a.ckpt)
    triple = (a.context, a.base, a.target)
    samples = sample_pairwise(net, triple, a.n, steps=a.steps, rng=run.rng(), solver=a.solver)
    run.write(a.out, _sample_lines(samples, triple))


def _load_graph(run, path):
    from .scene import SceneGraph

    with open(run.read(path)) as fh:
        doc = json.load(fh)
    try:
        validate(doc, "graph")
    except jsonschema.ValidationError as exc:
        raise GraphInvalid(f"scene graph does not match schema: {exc.message}") from None
    g = SceneGraph.from_json(doc)
    g.validate()
    return g


def _edge_lines(graph, samples):
    from .synthdata import state_record

    lines = []
    for e in graph.edges:
        lines.append(json.dumps(validate(state_record(samples[e.key].to_state(), graph.triple(e)),
                                         "sample_record")) + "\n")
    return "".join(lines)


def _guidance(a):
    from .sampler import GuidanceConfig

    return GuidanceConfig(t_act=a.t_act, guided=not a.unguided)


def cmd_scene(run: Run):
    from .sampler import sample_multi

    a = run.args
    net = _load_net(run, a.ckpt)
    graph = _load_graph(run, a.graph)
    layout, samples = sample_multi(net, graph, _guidance(a), steps=a.steps, rng=run.rng())
    run.write(a.out, _dump(validate(layout.to_json(graph), "layout")))
    if a.samples_out:
        run.write(a.samples_out, _edge_lines(graph, samples))


def cmd_edit(run: Run):
    from .editing import EditConfig, rearrange_scene
    from .sampler import GuidanceConfig
    from .scene import SceneLayout, layout_to_states

    a = run.args
    net = _load_net(run, a.ckpt)
    graph = _load_graph(run, a.graph)
    with open(run.read(a.layout)) as fh:
        layout0 = SceneLayout.from_json(validate(json.load(fh), "layout"))
    states0 = layout_to_states(graph, layout0)
    trace = [] if a.trace else None
    cfg = EditConfig(eta=a.eta, lambda1=a.lambda1, steps=a.edit_steps)
    layout, samples = rearrange_scene(net, graph, states0, cfg, GuidanceConfig(guided=not a.unguided),
                                      trace=trace)
    run.write(a.out, _dump(validate(layout.to_json(graph), "layout")))
    if trace is not None:
        from .synthdata import state_record

        lines = []
        for step, states in enumerate(trace):
            edges = [state_record(v, graph.triple(e)) for v, e in zip(states, graph.edges)]
            lines.append(json.dumps({"step": step + 1, "edges": edges}) + "\n")
        run.write(a.trace, "".join(lines))


def cmd_register(run: Run):
    from .geometry import Aabb, read_obj
    from .registration import FeatureCloud, RegistrationConfig, extract_oor
    from .synthdata import state_record

    a = run.args
    clouds = [FeatureCloud.load(run.read(p)) for p in (a.base_cloud, a.target_cloud,
                                                      a.base_template, a.target_template)]
    boxes = []
    for mesh_path, tmpl in ((a.base_mesh, clouds[2]), (a.target_mesh, clouds[3])):
        boxes.append(read_obj(run.read(mesh_path)).bbox() if mesh_path else Aabb.of_points(tmpl.points))
    cfg = RegistrationConfig(f_prime=a.f_prime, threshold=a.threshold, ransac_iters=a.ransac_iters)
    oor, reg_b, reg_t = extract_oor(*clouds, *boxes, cfg=cfg, rng=run.rng())
    rec = state_record(oor.to_state(), ("", "", ""))
    doc = {
        "oor": {k: rec[k] for k in ("rot6d", "t", "s_tb", "s_b")},
        "base": reg_b.to_json(),
        "target": reg_t.to_json(),
    }
    run.write(a.out, _dump(validate(doc, "registration")))


def cmd_eval(run: Run):
    from .metrics import fd_between_sample_sets
    from .synthdata import load_dataset

    a = run.args
    xa = np.array([v for v, _ in load_dataset(run.read(a.set_a))])
    xb = np.array([v for v, _ in load_dataset(run.read(a.set_b))])
    if len(xa) < 2 or len(xb) < 2:
        raise InsufficientSamples("both sample sets need at least 2 samples")
    fd = fd_between_sample_sets(xa, xb)
    run.write(a.out, json.dumps(validate({"fd": fd, "n_a": len(xa), "n_b": len(xb)}, "eval")) + "\n")


def cmd_export_obj(run: Run):
    from .geometry import box_mesh, canonicalize_mesh, read_obj, write_obj
    from .scene import SceneLayout

    a = run.args
    graph = _load_graph(run, a.graph)
    with open(run.read(a.layout)) as fh:
        layout = SceneLayout.from_json(validate(json.load(fh), "layout"))
    templates = {}
    for spec in a.mesh or []:
        cat, _, path = spec.partition("=")
        if not path:
            raise OORError(f"--mesh expects category=path, got {spec!r}")
        mesh, _ = canonicalize_mesh(read_obj(run.read(path)))
        templates[cat] = mesh
    parts = []
    for n in graph.nodes:
        pose = layout.poses[n.id]
        mesh = templates.get(n.category)
        if mesh is None:
            local = box_mesh((1.0, 1.0, 1.0))
        else:
            # canonical mesh has longest edge 1; stretch it to the unit cube before placing
            local = mesh.transformed(lambda v, e=mesh.bbox().extents: v / e)
        placed = local.transformed(lambda v, p=pose: (v * p.scale) @ p.rot.T + p.trans)
        parts.append((n.id, placed))
    write_obj(a.out, parts)
    run.outputs[a.out] = _file_sha(a.out)


def cmd_replay(run: Run):
    a = run.args
    with open(a.manifest) as fh:
        man = validate(json.load(fh), "manifest")
    proc = subprocess.run([sys.executable, "-m", "oor", *man["argv"], "--manifest", os.devnull],
                          capture_output=True, text=True)
    if proc.returncode != 0:
        sys.stderr.write(proc.stderr)
        return proc.returncode
    mismatches = {}
    for path, digest in man["outputs"].items():
        got = _file_sha(path) if os.path.exists(path) else None
        if got != digest:
            mismatches[path] = {"expected": digest, "got": got}
    if man.get("stdout_sha256") is not None:
        got = _sha256(proc.stdout.encode())
        if got != man["stdout_sha256"]:
            mismatches["<stdout>"] = {"expected": man["stdout_sha256"], "got": got}
    else:
        sys.stdout.write(proc.stdout)
    report = {"identical": not mismatches, "checked": len(man["outputs"]), "mismatches": mismatches}
    if a.check:
        print(json.dumps(report))
        return 0 if not mismatches else 1
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "scene": cmd_scene,
    "edit": cmd_edit,
    "register": cmd_register,
    "eval": cmd_eval,
    "export-obj": cmd_export_obj,
    "replay": cmd_replay,
}


# parser ------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flag defaults (explicit flags win)")
    common.add_argument("--manifest", help="where to write the run manifest")

    p = argparse.ArgumentParser(prog="oor", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, seed=False):
        sp = sub.add_parser(name, help=help_, parents=[common])
        if seed:
            sp.add_argument("--seed", type=int, required=True)
        return sp

    sp = add("gen-data", "write a toy training set as JSONL", seed=True)
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train", "train a score network checkpoint", seed=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--batch-size", type=int, default=256)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--lr-final", type=float, default=None)
    sp.add_argument("--hidden", type=int, default=256)
    sp.add_argument("--depth", type=int, default=5)
    sp.add_argument("--precond", choices=["residual", "edm"], default="edm")
    sp.add_argument("--sigma-data", type=float, default=0.5)
    sp.add_argument("--holdout", type=float, default=0.0)
    sp.add_argument("--sigma-min", type=float, default=0.01)
    sp.add_argument("--sigma-max", type=float, default=50.0)
    sp.add_argument("--epsilon", type=float, default=1e-5)
    sp.add_argument("--verbose", action="store_true")

    sp = add("sample", "sample pairwise OORs as JSONL", seed=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--context", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("-n", type=int, default=1)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--solver", choices=["euler", "rk45"], default="euler")
    sp.add_argument("--out", default=None)

    sp = add("scene", "guided multi-object layout from a scene graph", seed=True)
    sp.add_argument("--graph", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--samples-out", default=None)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--t-act", type=float, default=0.5)
    sp.add_argument("--unguided", action="store_true")

    sp = add("edit", "score-guided editing of an existing layout")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--graph", required=True)
    sp.add_argument("--layout", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--trace", default=None)
    sp.add_argument("--eta", type=float, default=0.01)
    sp.add_argument("--lambda1", type=float, default=0.01)
    sp.add_argument("--edit-steps", type=int, default=50)
    sp.add_argument("--unguided", action="store_true")

    sp = add("register", "extract an OOR from two registered feature clouds", seed=True)
    sp.add_argument("--base-cloud", required=True)
    sp.add_argument("--target-cloud", required=True)
    sp.add_argument("--base-template", required=True)
    sp.add_argument("--target-template", required=True)
    sp.add_argument("--base-mesh", default=None)
    sp.add_argument("--target-mesh", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--f-prime", type=int, default=15)
    sp.add_argument("--threshold", type=float, default=0.7)
    sp.add_argument("--ransac-iters", type=int, default=1000)

    sp = add("eval", "Frechet distance between two sample JSONL files")
    sp.add_argument("--set-a", required=True)
    sp.add_argument("--set-b", required=True)
    sp.add_argument("--out", default=None)

    sp = add("export-obj", "place template meshes (or unit boxes) of a layout into one OBJ")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--layout", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mesh", action="append", help="category=path.obj (repeatable)")

    sp = sub.add_parser("replay", help="re-run a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--check", action="store_true", help="compare output hashes")
    return p


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            defaults = json.load(fh)
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            sp.error(f"unknown config keys: {', '.join(unknown)}")
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})
        args = parser.parse_args(argv)
    return args


def _manifest(run: Run, argv, elapsed, stdout_text):
    a = run.args
    config = {k: v for k, v in vars(a).items() if k not in ("command", "manifest", "config")}
    return {
        "command": a.command,
        "argv": list(argv),
        "config": config,
        "seed": getattr(a, "seed", None),
        "inputs": run.inputs,
        "outputs": run.outputs,
        "stdout_sha256": _sha256(stdout_text.encode()) if stdout_text else None,
        "wall_clock_s": elapsed,
        "version": _version(),
    }


def _write_manifest(run: Run, doc):
    a = run.args
    text = json.dumps(validate(doc, "manifest"), indent=2) + "\n"
    target = a.manifest
    if target is None:
        out = getattr(a, "out", None)
        target = f"{out}.manifest.json" if out else None
    if target is None:
        sys.stderr.write(text)
    else:
        with open(target, "w") as fh:
            fh.write(text)


def _thread_limits():
    n = os.environ.get("OOR_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    limiter = _thread_limits()
    run = Run(args)
    start = time.perf_counter()
    try:
        status = COMMANDS[args.command](run) or 0
    except OORError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        code = "io_error" if isinstance(exc, OSError) else "invalid_input"
        print(json.dumps({"error": code, "message": str(exc)}), file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    text = run.stdout.getvalue()
    if text:
        sys.stdout.write(text)
        sys.stdout.flush()
    if args.command != "replay":
        _write_manifest(run, _manifest(run, argv, time.perf_counter() - start, text))
    return status


if __name__ == "__main__":
    sys.exit(main())
