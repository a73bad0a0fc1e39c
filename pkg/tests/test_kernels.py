import os
import subprocess
import sys

import numpy as np
import pytest

from oor import kernels
from oor.scene import collision_loss, compose_scene, inconsistency_loss
from toys import CHAIN, CROWD, DIAMOND, graph

GRAPHS = {
    "chain": CHAIN,
    "diamond": DIAMOND,
    "crowd": CROWD,
    "fixed_root": graph([("a", "b", "x"), ("a", "c", "x"), ("b", "d", "x"), ("c", "d", "x")],
                        fixed={"a": [1.5, 0.5, 1.0]}),
}


def random_states(g, rng, b=16):
    x = rng.normal(scale=0.4, size=(b, len(g.edges), 15))
    x[..., :6] += [1, 0, 0, 0, 1, 0]
    x[..., 9:] = rng.uniform(0.2, 1.5, size=(b, len(g.edges), 6))
    return x


def reference(g, states):
    c = [collision_loss(g, compose_scene(g, s)) for s in states]
    i = [inconsistency_loss(g, s) for s in states]
    return np.array(c), np.array(i)


@pytest.mark.parametrize("name", list(GRAPHS))
@pytest.mark.parametrize("backend", ["python", "cython"])
def test_kernel_matches_reference(name, backend):
    if backend == "cython" and kernels.BACKEND != "cython":
        pytest.skip("compiled extension not built")
    g = GRAPHS[name]
    x = random_states(g, np.random.default_rng(0))
    c, i = kernels.scene_losses(g.topology(), x, backend=backend)
    c_ref, i_ref = reference(g, x)
    assert np.allclose(c, c_ref, rtol=1e-10, atol=1e-12)
    assert np.allclose(i, i_ref, rtol=1e-10, atol=1e-12)


def test_backends_agree():
    if kernels.BACKEND != "cython":
        pytest.skip("compiled extension not built")
    x = random_states(DIAMOND, np.random.default_rng(1), 500)
    py = kernels.scene_losses(DIAMOND.topology(), x, backend="python")
    cy = kernels.scene_losses(DIAMOND.topology(), x, backend="cython")
    for a, b in zip(py, cy):
        assert np.abs(a - b).max() <= 1e-12 * max(1.0, np.abs(a).max())


def test_env_var_forces_fallback():
    env = dict(os.environ, OOR_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from oor import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
