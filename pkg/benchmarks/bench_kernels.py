"""Compare the compiled and numpy scene-loss kernels on a diamond-plus-tail graph.

    python benchmarks/bench_kernels.py [--batch 2000] [--repeat 5]
"""
import argparse
import time

import numpy as np

from oor import kernels
from oor.geometry import matrix_to_rot6d, random_rotation
from oor.scene import SceneGraph

GRAPH = {
    "nodes": [{"id": n, "category": n} for n in ("table", "lamp", "book", "cup", "spoon")],
    "edges": [
        {"base": "table", "target": "lamp", "context": "on"},
        {"base": "table", "target": "book", "context": "on"},
        {"base": "lamp", "target": "cup", "context": "near"},
        {"base": "book", "target": "cup", "context": "near"},
        {"base": "cup", "target": "spoon", "context": "in"},
    ],
}


def random_states(n_scenes, n_edges, rng):
    x = np.empty((n_scenes, n_edges, 15))
    x[..., :6] = matrix_to_rot6d(random_rotation(rng, n_scenes * n_edges)).reshape(n_scenes, n_edges, 6)
    x[..., 6:9] = rng.normal(0.0, 0.5, (n_scenes, n_edges, 3))
    x[..., 9:] = rng.uniform(0.3, 1.5, (n_scenes, n_edges, 6))
    return x


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    graph = SceneGraph.from_json(GRAPH)
    topo = graph.topology()
    states = random_states(a.batch, len(graph.edges), np.random.default_rng(a.seed))
    print(f"default backend: {kernels.BACKEND}; {a.batch} scenes x {len(graph.edges)} edges")
    ref = kernels.scene_losses(topo, states, backend="python")
    t_py = best_time(lambda: kernels.scene_losses(topo, states, backend="python"), a.repeat)
    print(f"python  {t_py * 1e3:8.2f} ms  ({t_py / a.batch * 1e6:.2f} us/scene)")
    try:
        got = kernels.scene_losses(topo, states, backend="cython")
    except ImportError:
        print("cython  unavailable (extension not built)")
        return
    t_cy = best_time(lambda: kernels.scene_losses(topo, states, backend="cython"), a.repeat)
    err = max(np.max(np.abs(g - r)) for g, r in zip(got, ref))
    print(f"cython  {t_cy * 1e3:8.2f} ms  ({t_cy / a.batch * 1e6:.2f} us/scene)")
    print(f"speedup {t_py / t_cy:.1f}x, max abs difference {err:.2e}")


if __name__ == "__main__":
    main()
