import json
import subprocess
import sys

import jsonschema
import pytest

from cliwork import GRAPH, build_workspace, run_cli
from oor.cli import validate


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    paths, manifests = build_workspace(root)
    return root, paths, manifests


def lines(path):
    return [json.loads(x) for x in path.read_text().splitlines()]


# exit codes -----------------------------------------------------------------

def test_usage_errors_exit_2():
    assert run_cli("frobnicate")[0] == 2
    code, _, err = run_cli("sample", "--ckpt", "x.json")
    assert code == 2 and "--context" in err


def test_sample_requires_seed(work):
    _, p, _ = work
    code, _, err = run_cli("sample", "--ckpt", p["ckpt"], "--context", "on", "--base", "table",
                           "--target", "cup")
    assert code == 2 and "--seed" in err


def test_domain_error_exit_1(work):
    _, p, _ = work
    code, _, err = run_cli("sample", "--ckpt", p["ckpt"], "--context", "under", "--base", "table",
                           "--target", "cup", "--seed", 0, "--manifest", "/dev/null")
    assert code == 1
    assert json.loads(err.strip().splitlines()[-1])["error"] == "unknown_context"


def test_missing_file_exit_1(work, tmp_path):
    code, _, err = run_cli("eval", "--set-a", tmp_path / "nope.jsonl", "--set-b", tmp_path / "nope.jsonl")
    assert code == 1 and json.loads(err)["error"] == "io_error"


def test_malformed_graph_exit_1(work, tmp_path):
    _, p, _ = work
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nodes": [{"id": "a"}], "edges": []}))
    code, _, err = run_cli("scene", "--graph", bad, "--ckpt", p["ckpt"], "--seed", 0, "--out",
                           tmp_path / "o.json")
    assert code == 1 and json.loads(err)["error"] == "graph_invalid"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "oor", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "export-obj" in proc.stdout


# outputs --------------------------------------------------------------------

def test_gen_data_records(work):
    _, p, _ = work
    recs = lines(p["data"])
    assert len(recs) == 128
    for r in recs:
        validate(r, "sample_record")


def test_sample_deterministic(work, tmp_path):
    _, p, _ = work
    args = ["sample", "--ckpt", p["ckpt"], "--context", "on", "--base", "table", "--target", "cup",
            "-n", 10, "--steps", 40, "--manifest", tmp_path / "m.json"]
    a = run_cli(*args, "--seed", 7)
    b = run_cli(*args, "--seed", 7)
    c = run_cli(*args, "--seed", 8)
    assert a[0] == 0 and a[1] == b[1] != c[1]
    recs = [json.loads(x) for x in a[1].splitlines()]
    assert len(recs) == 10 and all(r["context"] == "on" for r in recs)
    assert a[1] == p["samples"].read_text()


def test_scene_layout_schema(work):
    _, p, _ = work
    doc = validate(json.loads(p["layout"].read_text()), "layout")
    assert {o["id"] for o in doc["objects"]} == {n["id"] for n in GRAPH["nodes"]}
    assert len(lines(p["edges"])) == len(GRAPH["edges"])


def test_edit_outputs(work):
    _, p, _ = work
    validate(json.loads(p["edited"].read_text()), "layout")
    trace = lines(p["trace"])
    assert [t["step"] for t in trace] == [1, 2, 3, 4, 5]


def test_register_output(work):
    _, p, _ = work
    doc = validate(json.loads(p["reg"].read_text()), "registration")
    assert len(doc["oor"]["rot6d"]) == 6


def test_eval_identical_sets(work):
    _, p, _ = work
    code, out, _ = run_cli("eval", "--set-a", p["samples"], "--set-b", p["samples"], "--manifest", "/dev/null")
    assert code == 0
    assert json.loads(out) == {"fd": 0.0, "n_a": 10, "n_b": 10}


def test_export_obj(work):
    _, p, _ = work
    text = p["obj"].read_text()
    assert text.count("\no ") + text.startswith("o ") == 3


def test_config_file_defaults(work, tmp_path):
    _, p, _ = work
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 3, "steps": 20}))
    code, out, _ = run_cli("sample", "--ckpt", p["ckpt"], "--context", "on", "--base", "table",
                           "--target", "cup", "--seed", 1, "--config", cfg, "-n", 4,
                           "--manifest", tmp_path / "m.json")
    assert code == 0 and len(out.splitlines()) == 4
    man = json.loads((tmp_path / "m.json").read_text())
    assert man["config"]["steps"] == 20 and man["config"]["n"] == 4
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run_cli("eval", "--set-a", p["samples"], "--set-b", p["samples"], "--config", cfg)[0] == 2


# manifests ------------------------------------------------------------------

def test_manifests_validate(work):
    _, _, manifests = work
    for name, path in manifests.items():
        man = validate(json.loads(path.read_text()), "manifest")
        assert man["command"] == name and man["outputs"]
        assert man["version"]


def test_default_manifest_location(work, tmp_path):
    _, p, _ = work
    out = tmp_path / "fd.json"
    assert run_cli("eval", "--set-a", p["samples"], "--set-b", p["samples"], "--out", out)[0] == 0
    assert (tmp_path / "fd.json.manifest.json").exists()


def test_replay_detects_tampering(work, tmp_path):
    _, p, manifests = work
    man = json.loads(manifests["eval"].read_text())
    man["outputs"] = {k: "0" * 64 for k in man["outputs"]}
    bad = tmp_path / "bad.manifest.json"
    bad.write_text(json.dumps(man))
    code, out, _ = run_cli("replay", "--manifest", bad, "--check")
    assert code == 1 and json.loads(out)["identical"] is False


def test_schema_rejects_bad_record():
    with pytest.raises(jsonschema.ValidationError):
        validate({"context": "on", "base": "a", "target": "b", "rot6d": [1, 0], "t": [0, 0, 0],
                  "s_tb": [1, 1, 1], "s_b": [1, 1, 1]}, "sample_record")
