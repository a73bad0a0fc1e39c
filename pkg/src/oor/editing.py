"""Score-guided editing of existing arrangements and instance-scale fitting.

An edit keeps the result close to the input arrangement while climbing the
learned log-density at the smallest noise level::

    phi <- phi - eta * ((phi - phi0) - lambda1 * Psi(phi, epsilon | c))

Only the pose block (6D rotation and translation) is updated; scales are
carried over from the input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import OORSample, matrix_to_rot6d, rot6d_to_matrix
from .network import POSE_DIM, STATE_DIM
from .sampler import (
    GuidanceConfig,
    _Guidance,
    integrate_scene,
    initial_scene_states,
    lambda1,
    lambda2,
    scale_constraints,
    states_to_edge_samples,
)
from .scene import Node, SceneGraph, compose_scene, edge_states


@dataclass
class EditConfig:
    eta: float = 0.01
    lambda1: float = 0.01
    steps: int = 50
    max_halvings: int = 30

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")


def arrange_step(phi, phi0, psi, eta, lam):
    """One proximal score step on the pose block; scale entries are returned unchanged."""
    phi = np.array(phi, dtype=float)
    phi0 = np.asarray(phi0, dtype=float)
    psi = np.asarray(psi, dtype=float)
    p = slice(0, POSE_DIM)
    phi[..., p] = phi[..., p] - eta * ((phi[..., p] - phi0[..., p]) - lam * psi[..., p])
    return phi


def _reorthonormalize(new, old):
    """Project changed 6D blocks back onto rotations; untouched rows keep their bits."""
    changed = np.any(new[..., :6] != old[..., :6], axis=-1)
    if np.any(changed):
        new[changed, :6] = matrix_to_rot6d(rot6d_to_matrix(new[changed, :6]))
    return new


def surrogate_delta(phi, nxt, phi0, psi, psi_next, lam):
    """Change of 0.5 |phi - phi0|^2 - lam log p from phi to nxt over the pose block.

    The log-density change is the trapezoidal line integral of the score.
    """
    p = slice(0, POSE_DIM)
    prox = 0.5 * (np.sum((nxt[..., p] - phi0[..., p]) ** 2, axis=-1)
                  - np.sum((phi[..., p] - phi0[..., p]) ** 2, axis=-1))
    lik = 0.5 * np.sum((psi[..., p] + psi_next[..., p]) * (nxt[..., p] - phi[..., p]), axis=-1)
    return prox - lam * lik


def _edit_states(net, cidx, state0, cfg: EditConfig, guide=None, weights=(0.0, 0.0), trace=None,
                 report=None):
    """Proximal score iterations on rows of ``state0`` (R, 15).

    A row whose surrogate objective would increase has its step halved (up to
    ``cfg.max_halvings`` times, then it stays put); ``report["halvings"]``
    collects the per-step halving counts and ``report["objective"]`` the
    cumulative surrogate change.
    """
    t = net.schedule.epsilon
    flat = cidx.ravel()

    def score(x):
        return net.score_batch(x.reshape(-1, STATE_DIM), t, flat).reshape(x.shape)

    phi0 = np.array(state0, dtype=float)
    phi = phi0.copy()
    psi = score(phi)
    total = np.zeros(len(phi))
    for _ in range(cfg.steps):
        eta = np.full((len(phi), 1), cfg.eta)
        nxt = _reorthonormalize(arrange_step(phi, phi0, psi, eta, cfg.lambda1), phi)
        psi_next = score(nxt)
        delta = surrogate_delta(phi, nxt, phi0, psi, psi_next, cfg.lambda1)
        halvings = np.zeros(len(phi), dtype=int)
        bad = delta > 0
        while bad.any():
            if halvings[bad].max() >= cfg.max_halvings:
                stuck = bad & (halvings >= cfg.max_halvings)
                nxt[stuck], psi_next[stuck], delta[stuck] = phi[stuck], psi[stuck], 0.0
                bad &= ~stuck
                continue
            eta[bad] *= 0.5
            halvings[bad] += 1
            trial = _reorthonormalize(arrange_step(phi[bad], phi0[bad], psi[bad], eta[bad], cfg.lambda1),
                                      phi[bad])
            psi_trial = net.score_batch(trial, t, flat[bad])
            nxt[bad], psi_next[bad] = trial, psi_trial
            delta[bad] = surrogate_delta(phi[bad], trial, phi0[bad], psi[bad], psi_trial, cfg.lambda1)
            bad = delta > 0
        total += delta
        if guide is not None:
            moved = guide.step(nxt[None], weights[0], weights[1], cfg.eta, 30)[0]
            moved = _reorthonormalize(moved, nxt)
            if not np.array_equal(moved, nxt):
                nxt, psi_next = moved, score(moved)
        phi, psi = nxt, psi_next
        if trace is not None:
            trace.append(phi.copy())
        if report is not None:
            report.setdefault("halvings", []).append(halvings)
            report.setdefault("objective", []).append(total.copy())
    return phi


def rearrange(net, cond, phi0: OORSample, cfg: EditConfig = None, trace=None, report=None) -> OORSample:
    """Denoise a single arrangement toward the context's distribution."""
    cfg = cfg or EditConfig()
    cidx = np.array([net.context_index(cond)])
    out = _edit_states(net, cidx, phi0.to_state()[None], cfg, trace=trace, report=report)[0]
    if np.array_equal(out[:6], phi0.to_state()[:6]):
        rot = phi0.rot.copy()
    else:
        rot = rot6d_to_matrix(out[:6])
    return OORSample(rot, out[6:9], phi0.scale_tb.copy(), phi0.scale_b.copy())


def apply_context(net, new_cond, phi0: OORSample, cfg: EditConfig = None, trace=None,
                  report=None) -> OORSample:
    """Move an arrangement toward the distribution of a different context."""
    return rearrange(net, new_cond, phi0, cfg, trace, report)


def rearrange_scene(net, graph: SceneGraph, samples, cfg: EditConfig = None,
                    guidance: GuidanceConfig = None, trace=None, report=None):
    """Edit every edge of a scene lock-step, adding collision and inconsistency descent.

    The guidance weights are the closed-form schedules at t = epsilon.
    """
    cfg = cfg or EditConfig()
    guidance = guidance or GuidanceConfig()
    topo = graph.topology()
    cidx = np.array([net.context_index(graph.triple(e)) for e in graph.edges], dtype=np.int64)
    states0 = edge_states(graph, samples)
    free = np.zeros_like(states0, dtype=bool)
    free[:, :POSE_DIM] = True
    eps = net.schedule.epsilon
    weights = (lambda1(eps, guidance), lambda2(eps, guidance)) if guidance.guided else (0.0, 0.0)
    guide = _Guidance(topo, free, guidance.fd_step) if any(weights) else None
    out = _edit_states(net, cidx, states0, cfg, guide, weights, trace, report)
    edited = states_to_edge_samples(graph, out)
    return compose_scene(graph, edited), edited


def _pin_existing_scales(graph: SceneGraph, fixed, fixed_scales):
    """Copy of ``graph`` whose nodes in the fixed sub-scene keep their current scales."""
    sub = SceneGraph([Node(n.id, n.category, n.fixed_scale) for n in graph.nodes
                      if any(n.id in k for k in fixed)],
                     [e for e in graph.edges if e.key in fixed])
    pinned = {nid: p.scale for nid, p in compose_scene(sub, fixed).poses.items()}
    for nid, v in (fixed_scales or {}).items():
        pinned[nid] = v
    nodes = [Node(n.id, n.category, pinned.get(n.id, n.fixed_scale)) for n in graph.nodes]
    return SceneGraph(nodes, list(graph.edges))


def insert_objects(net, graph: SceneGraph, fixed, fixed_scales=None, cfg: GuidanceConfig = None,
                   rng=None, steps=500):
    """Sample the edges of ``graph`` missing from ``fixed`` while holding the rest constant.

    ``fixed`` maps (base, target) to OORSample; ``fixed_scales`` maps node ids
    to scales that the new edges must respect. Objects already in the fixed
    sub-scene keep their current scales.
    """
    cfg = cfg or GuidanceConfig()
    keys = [e.key for e in graph.edges]
    for k in fixed:
        if k not in keys:
            raise KeyError(f"fixed edge {k} is not in the graph")
    if fixed and len(fixed) < len(keys):
        graph = _pin_existing_scales(graph, fixed, fixed_scales)
        fixed_scales = None
    mask, values = scale_constraints(graph, fixed_scales)
    for i, k in enumerate(keys):
        if k in fixed:
            mask[i] = True
            values[i] = fixed[k].to_state()
    if mask.all():
        samples = {k: fixed[k] for k in keys}
        return compose_scene(graph, samples), samples
    x0 = initial_scene_states(graph, net, rng, 1)
    states = integrate_scene(net, graph, cfg, steps, x0, mask, values)[0]
    out = states_to_edge_samples(graph, states)
    for k in fixed:
        out[k] = fixed[k]
    return compose_scene(graph, out), out


def fit_instance_scale(s, mesh_bbox_extents):
    """Isotropic rescaling of a mesh's extents matching the mean ratio to ``s``."""
    s = np.asarray(s, dtype=float)
    ext = np.asarray(mesh_bbox_extents, dtype=float)
    if np.any(ext <= 0):
        raise ValueError("mesh extents must be positive")
    return np.mean(s / ext) * ext
