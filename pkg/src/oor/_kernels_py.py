"""Pure numpy scene-loss kernel, vectorised over a batch of scene states.

Same contract as the compiled ``oor._kernels`` module: given states of shape
``(B, E, 15)`` and the graph's index arrays, return per-scene collision and
inconsistency losses. Degenerate 6D rotations yield NaN rather than raising.
"""
import numpy as np


def _gram_schmidt(a):
    x = a[..., 0:3]
    x = x / np.linalg.norm(x, axis=-1, keepdims=True)
    y = a[..., 3:6] - np.sum(x * a[..., 3:6], axis=-1, keepdims=True) * x
    y = y / np.linalg.norm(y, axis=-1, keepdims=True)
    return np.stack([x, y, np.cross(x, y)], axis=-1)


def _project_so3(m):
    u, _, vt = np.linalg.svd(m)
    d = np.ones(m.shape[:-1])
    d[..., 2] = np.sign(np.linalg.det(u @ vt))
    return (u * d[..., None, :]) @ vt


def scene_poses(states, edge_base, in_ptr, in_edges, root_out, root_scale, root_scale_fixed):
    """Global (R, t, S) per node plus the multi-parent variance term."""
    states = np.asarray(states, dtype=float)
    b = states.shape[0]
    n_nodes = len(in_ptr) - 1
    rot_e = _gram_schmidt(states[..., :6])
    rots = np.zeros((b, n_nodes, 3, 3))
    trans = np.zeros((b, n_nodes, 3))
    scales = np.zeros((b, n_nodes, 3))
    rots[:, 0] = np.eye(3)
    if root_scale_fixed:
        scales[:, 0] = root_scale
    elif len(root_out):
        scales[:, 0] = states[:, root_out, 12:15].mean(axis=1)
    else:
        scales[:, 0] = 1.0
    p2 = np.zeros(b)
    for k in range(1, n_nodes):
        edges = in_edges[in_ptr[k]:in_ptr[k + 1]]
        parents = edge_base[edges]
        rp = rots[:, parents]
        tp = trans[:, parents]
        sp = scales[:, parents]
        v = states[:, edges]
        ratio = np.mean(sp / v[..., 12:15], axis=-1, keepdims=True)
        rc = rp @ rot_e[:, edges]
        tc = np.einsum("bpij,bpj->bpi", rp, ratio * v[..., 6:9]) + tp
        sc = ratio * v[..., 9:12]
        if len(edges) == 1:
            rots[:, k], trans[:, k], scales[:, k] = rc[:, 0], tc[:, 0], sc[:, 0]
        else:
            flat = np.concatenate([rc[..., :, 0], rc[..., :, 1], tc, sc], axis=-1)
            p2 += np.var(flat, axis=1).sum(axis=-1)
            rots[:, k] = _project_so3(rc.mean(axis=1))
            trans[:, k] = tc.mean(axis=1)
            scales[:, k] = sc.mean(axis=1)
    return rots, trans, scales, p2


def scene_losses(states, edge_base, in_ptr, in_edges, pair_i, pair_j, root_out, p3_edges,
                 root_scale, root_scale_fixed):
    states = np.asarray(states, dtype=float)
    rots, trans, scales, p2 = scene_poses(
        states, edge_base, in_ptr, in_edges, root_out, root_scale, root_scale_fixed
    )
    if len(root_out) > 1:
        p1 = np.var(states[:, root_out, 12:15], axis=1).sum(axis=-1)
    else:
        p1 = np.zeros(len(states))
    if len(p3_edges):
        sp = scales[:, edge_base[p3_edges]]
        p3 = np.var(sp / states[:, p3_edges, 12:15], axis=-1).sum(axis=-1)
    else:
        p3 = np.zeros(len(states))
    incons = (p1 + p2 + p3) / 3.0

    if len(pair_i):
        half = 0.5 * np.einsum("bnij,bnj->bni", np.abs(rots), scales)
        lo, hi = trans - half, trans + half
        d = np.minimum(hi[:, pair_i], hi[:, pair_j]) - np.maximum(lo[:, pair_i], lo[:, pair_j])
        coll = np.prod(np.clip(d, 0.0, None), axis=-1).sum(axis=-1)
    else:
        coll = np.zeros(len(states))
    return coll, incons
