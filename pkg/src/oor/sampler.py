"""Probability-flow ODE sampling of pairwise OORs and guided scene sampling.

Pairwise sampling integrates ``dphi/dt = -sigma(t) sigma'(t) Psi(phi, t | c)``
from ``t = 1`` down to ``t = epsilon``. Scene sampling advances every edge
state of a graph in lock-step and, once ``t <= t_act``, adds a guidance step
that descends ``lambda1(t) C + lambda2(t) I``. The guidance step is taken
after the score step and is halved until the weighted loss does not increase.

Scale positivity is enforced by projecting scale components onto
``[SCALE_FLOOR, inf)``. By default the projection is applied to the final
states only (``positivity="final"``); ``positivity="step"`` projects after
every step, which truncates the wide high-noise marginals and biases the
sampled scale distribution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from . import kernels
from .errors import GraphInvalid, OutOfRange
from .geometry import OORSample, rot6d_to_matrix
from .network import STATE_DIM
from .scene import SceneGraph, compose_scene

SCALE_FLOOR = 1e-4


@dataclass
class GuidanceConfig:
    lambda1_scale: float = 100.0
    lambda1_max: float = 1e4
    lambda2_scale: float = 100.0
    lambda2_max: float = 1e5
    t_act: float = 0.5
    guided: bool = True
    fd_step: float = 1e-3
    max_halvings: int = 30

    def __post_init__(self):
        if not (0.0 < self.t_act <= 1.0):
            raise OutOfRange("t_act must lie in (epsilon, 1]")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be positive")


def lambda1(t, cfg: GuidanceConfig = None):
    cfg = cfg or GuidanceConfig()
    return min(cfg.lambda1_scale / t, cfg.lambda1_max)


def lambda2(t, cfg: GuidanceConfig = None):
    cfg = cfg or GuidanceConfig()
    return min(cfg.lambda2_scale / t**2, cfg.lambda2_max)


def guidance_weights(t, cfg: GuidanceConfig = None):
    """(lambda1, lambda2) at time t, both zero above the activation time."""
    cfg = cfg or GuidanceConfig()
    if not cfg.guided or t > cfg.t_act:
        return 0.0, 0.0
    return lambda1(t, cfg), lambda2(t, cfg)


def time_grid(schedule, steps):
    if steps < 2:
        raise ValueError("steps must be at least 2")
    return np.linspace(1.0, schedule.epsilon, steps + 1)


def _project_scales(x):
    np.maximum(x[..., 9:], SCALE_FLOOR, out=x[..., 9:])
    return x


def _to_samples(states):
    out = []
    for v in states:
        v = np.array(v, dtype=float)
        out.append(OORSample(rot6d_to_matrix(v[:6]), v[6:9], v[9:12], v[12:15]))
    return out


def _check_positivity(mode):
    if mode not in ("final", "step"):
        raise ValueError(f"unknown positivity mode {mode!r}")


def sample_pairwise_states(net, cond, n, steps=500, rng=None, solver="euler", x0=None,
                           positivity="final"):
    """Final states (n, 15). ``solver`` is ``"euler"`` or ``"rk45"``."""
    _check_positivity(positivity)
    idx = net.context_index(cond)
    sched = net.schedule
    ts = time_grid(sched, steps)
    if x0 is None:
        x0 = rng.standard_normal((n, STATE_DIM)) * sched.sigma(1.0)
    x = np.array(x0, dtype=float)
    if solver == "euler":
        for i in range(steps):
            t, dt = ts[i], ts[i + 1] - ts[i]
            drift = -sched.sigma(t) * sched.sigma_dot(t) * net.score_batch(x, t, idx)
            x = x + drift * dt
            if positivity == "step":
                _project_scales(x)
        return _project_scales(x)
    if solver == "rk45":
        shape = x.shape

        def rhs(t, y):
            t = min(max(t, sched.epsilon), 1.0)
            y = y.reshape(shape)
            return (-sched.sigma(t) * sched.sigma_dot(t) * net.score_batch(y, t, idx)).ravel()

        sol = solve_ivp(rhs, (1.0, sched.epsilon), x.ravel(), method="RK45", rtol=1e-5, atol=1e-6)
        return _project_scales(sol.y[:, -1].reshape(shape).copy())
    raise ValueError(f"unknown solver {solver!r}")


def sample_pairwise(net, cond, n, steps=500, rng=None, solver="euler", positivity="final"):
    return _to_samples(sample_pairwise_states(net, cond, n, steps, rng, solver,
                                              positivity=positivity))


# scene sampling ----------------------------------------------------------

def scale_constraints(graph: SceneGraph, fixed_scales=None):
    """Mask and values pinning edge scales of nodes with a fixed scale."""
    fixed = {n.id: n.fixed_scale for n in graph.nodes if n.fixed_scale is not None}
    for k, v in (fixed_scales or {}).items():
        fixed[k] = np.asarray(v, dtype=float).reshape(3)
    mask = np.zeros((len(graph.edges), STATE_DIM), dtype=bool)
    values = np.zeros((len(graph.edges), STATE_DIM))
    for i, e in enumerate(graph.edges):
        if e.base in fixed:
            mask[i, 12:15] = True
            values[i, 12:15] = fixed[e.base]
        if e.target in fixed:
            mask[i, 9:12] = True
            values[i, 9:12] = fixed[e.target]
    return mask, values


class _Guidance:
    """Weighted scene loss and its central-difference gradient over free components.

    Losses are evaluated with scales projected to the floor, so components
    below it receive no gradient.
    """

    def __init__(self, topo, free, h):
        self.topo = topo
        self.free = np.flatnonzero(free.ravel())
        self.h = h

    def losses(self, x):
        return kernels.scene_losses(self.topo, _project_scales(x.copy()))

    def value(self, x, w1, w2):
        c, i = self.losses(x)
        return w1 * c + w2 * i

    def gradient(self, x, w1, w2):
        b, e, d = x.shape
        k = len(self.free)
        flat = x.reshape(b, e * d)
        probes = np.repeat(flat[:, None, :], 2 * k, axis=1)
        cols = np.arange(k)
        probes[:, cols, self.free] += self.h
        probes[:, k + cols, self.free] -= self.h
        vals = self.value(probes.reshape(b * 2 * k, e, d), w1, w2).reshape(b, 2 * k)
        grad = np.zeros((b, e * d))
        grad[:, self.free] = (vals[:, :k] - vals[:, k:]) / (2.0 * self.h)
        return grad.reshape(b, e, d)

    def step(self, x, w1, w2, dt, max_halvings):
        """Descend the weighted loss from x, halving per scene until it does not increase.

        A step may at most halve any scale component that is above the floor.
        """
        g0 = self.value(x, w1, w2)
        delta = -abs(dt) * self.gradient(x, w1, w2)
        cur = x[..., 9:]
        lower = np.where(cur > SCALE_FLOOR, np.maximum(0.5 * cur, SCALE_FLOOR), cur)
        out = x.copy()
        todo = np.ones(len(x), dtype=bool)
        for _ in range(max_halvings + 1):
            trial = x[todo] + delta[todo]
            ok = self.value(trial, w1, w2) <= g0[todo]
            ok &= np.all(trial[..., 9:] >= lower[todo], axis=(1, 2))
            idx = np.flatnonzero(todo)
            out[idx[ok]] = trial[ok]
            todo[idx[ok]] = False
            if not todo.any():
                break
            delta[todo] *= 0.5
        return out


def integrate_scene(net, graph: SceneGraph, cfg: GuidanceConfig, steps, x0,
                    mask=None, values=None, trace=None, positivity="final"):
    """Integrate scene states x0 (B, E, 15); components where ``mask`` is True stay at ``values``."""
    _check_positivity(positivity)
    topo = graph.topology()
    sched = net.schedule
    if cfg.t_act <= sched.epsilon:
        raise OutOfRange("t_act must exceed the schedule's epsilon")
    cidx = np.array([net.context_index(graph.triple(e)) for e in graph.edges], dtype=np.int64)
    x = np.array(x0, dtype=float)
    b, n_edges, _ = x.shape
    if mask is None:
        mask = np.zeros((n_edges, STATE_DIM), dtype=bool)
        values = np.zeros((n_edges, STATE_DIM))
    x = np.where(mask, values, x)
    guide = _Guidance(topo, ~mask, cfg.fd_step)
    rows = np.tile(cidx, b)
    ts = time_grid(sched, steps)
    for i in range(steps):
        t, dt = ts[i], ts[i + 1] - ts[i]
        psi = net.score_batch(x.reshape(b * n_edges, STATE_DIM), t, rows).reshape(x.shape)
        x = x + (-sched.sigma(t) * sched.sigma_dot(t)) * psi * dt
        if positivity == "step":
            _project_scales(x)
        x = np.where(mask, values, x)
        w1, w2 = guidance_weights(t, cfg)
        if w1 or w2:
            x = guide.step(x, w1, w2, dt, cfg.max_halvings)
            x = np.where(mask, values, x)
        if trace is not None:
            trace.append(x.copy())
    return np.where(mask, values, _project_scales(x))


def initial_scene_states(graph: SceneGraph, net, rng, n_scenes=None):
    shape = (len(graph.edges), STATE_DIM) if n_scenes is None else (n_scenes, len(graph.edges), STATE_DIM)
    return rng.standard_normal(shape) * net.schedule.sigma(1.0)


def sample_multi_states(net, graph: SceneGraph, cfg: GuidanceConfig = None, steps=500, rng=None,
                        n_scenes=1, fixed_scales=None):
    """Final edge states (n_scenes, E, 15) of guided scene sampling."""
    cfg = cfg or GuidanceConfig()
    if not graph.edges:
        raise GraphInvalid("graph has no edges to sample")
    mask, values = scale_constraints(graph, fixed_scales)
    x0 = initial_scene_states(graph, net, rng, n_scenes)
    return integrate_scene(net, graph, cfg, steps, x0, mask, values)


def states_to_edge_samples(graph: SceneGraph, states):
    return dict(zip((e.key for e in graph.edges), _to_samples(states)))


def sample_multi(net, graph: SceneGraph, cfg: GuidanceConfig = None, steps=500, rng=None):
    """One guided scene: (layout, {(base, target): OORSample})."""
    states = sample_multi_states(net, graph, cfg, steps, rng, n_scenes=1)[0]
    samples = states_to_edge_samples(graph, states)
    return compose_scene(graph, samples), samples
