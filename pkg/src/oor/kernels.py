"""Batched scene-loss evaluation with a compiled backend when available.

The compiled extension ``oor._kernels`` is used unless it failed to build or
``OOR_PURE_PYTHON=1`` is set, in which case the numpy implementation in
``oor._kernels_py`` is used. Both expose ``scene_losses`` with one contract.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("OOR_PURE_PYTHON") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def scene_losses(topo, states, backend=None):
    """Collision and inconsistency losses for states of shape ``(B, E, 15)``."""
    impl = {"python": _kernels_py, None: _impl}.get(backend)
    if impl is None:
        from . import _kernels as impl
    states = np.ascontiguousarray(states, dtype=float)
    return impl.scene_losses(
        states, topo.edge_base, topo.in_ptr, topo.in_edges, topo.pair_i, topo.pair_j,
        topo.root_out, topo.p3_edges, topo.root_scale, bool(topo.root_scale_fixed),
    )
