"""Scene graphs, global composition of pairwise OORs, and the scene losses.

A scene is a connected DAG with a single in-degree-0 node (the global base)
whose instance canonical frame is the world frame. Each node's global pose is
``(R, t, S)``: a point ``x_hat`` of the node's scale-normalized space sits at
``R @ (S * x_hat) + t`` in the world.

Chaining an edge ``parent -> child`` with state ``(R_e, t_e, s_tb, s_b)``
reads the edge in the parent's instance space as described by ``s_b``; the
parent's placed scale ``S_p`` rescales it by ``k = mean(S_p / s_b)``::

    R_c = R_p R_e      t_c = R_p (k t_e) + t_p      S_c = k s_tb

The functions here are the readable reference definitions. The batched
kernels in :mod:`oor.kernels` compute the same quantities for many states.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphInvalid
from .geometry import (
    OORSample,
    aabb_of_placed,
    aabb_overlap_volume,
    matrix_to_rot6d,
    project_to_so3,
    rot6d_to_matrix,
)


@dataclass
class Node:
    id: str
    category: str
    fixed_scale: np.ndarray | None = None

    def __post_init__(self):
        if self.fixed_scale is not None:
            self.fixed_scale = np.asarray(self.fixed_scale, dtype=float).reshape(3)
            if np.any(self.fixed_scale <= 0):
                raise GraphInvalid(f"node {self.id}: fixed_scale must be positive")


@dataclass
class Edge:
    base: str
    target: str
    context: str

    @property
    def key(self):
        return (self.base, self.target)


@dataclass
class Topology:
    """Index arrays describing a validated graph (nodes in topological order)."""

    order: list
    node_index: dict
    edge_base: np.ndarray
    edge_target: np.ndarray
    in_ptr: np.ndarray
    in_edges: np.ndarray
    pair_i: np.ndarray
    pair_j: np.ndarray
    root_out: np.ndarray
    p3_edges: np.ndarray
    root_scale: np.ndarray
    root_scale_fixed: bool

    @property
    def n_nodes(self):
        return len(self.order)

    @property
    def n_edges(self):
        return len(self.edge_base)


@dataclass
class SceneGraph:
    nodes: list
    edges: list
    _topo: Topology | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.nodes = [n if isinstance(n, Node) else Node(**n) for n in self.nodes]
        self.edges = [e if isinstance(e, Edge) else Edge(**e) for e in self.edges]
        self.validate()

    # construction -------------------------------------------------------
    @classmethod
    def from_json(cls, d):
        try:
            nodes = [Node(n["id"], n["category"], n.get("fixed_scale")) for n in d["nodes"]]
            edges = [Edge(e["base"], e["target"], e["context"]) for e in d["edges"]]
        except (KeyError, TypeError) as exc:
            raise GraphInvalid(f"malformed scene graph: {exc}") from None
        return cls(nodes, edges)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def to_json(self):
        nodes = []
        for n in self.nodes:
            d = {"id": n.id, "category": n.category}
            if n.fixed_scale is not None:
                d["fixed_scale"] = n.fixed_scale.tolist()
            nodes.append(d)
        return {
            "nodes": nodes,
            "edges": [{"base": e.base, "target": e.target, "context": e.context} for e in self.edges],
        }

    # structure ----------------------------------------------------------
    def node(self, node_id) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise GraphInvalid(f"unknown node {node_id!r}")

    def triple(self, edge: Edge):
        return (edge.context, self.node(edge.base).category, self.node(edge.target).category)

    def edge_index(self, key):
        for i, e in enumerate(self.edges):
            if e.key == tuple(key):
                return i
        raise GraphInvalid(f"no edge {key!r}")

    def adjacent(self, a, b):
        return any({e.base, e.target} == {a, b} for e in self.edges)

    @property
    def root(self):
        return self.topology().order[0]

    def validate(self):
        ids = [n.id for n in self.nodes]
        if not ids:
            raise GraphInvalid("scene graph has no nodes")
        if len(set(ids)) != len(ids):
            raise GraphInvalid("duplicate node ids")
        seen = set()
        for e in self.edges:
            if e.base not in ids or e.target not in ids:
                raise GraphInvalid(f"edge {e.key} references an unknown node")
            if e.base == e.target:
                raise GraphInvalid(f"self loop on {e.base}")
            pair = frozenset(e.key)
            if pair in seen:
                raise GraphInvalid(f"more than one edge between {e.base} and {e.target}")
            seen.add(pair)
        indeg = {i: 0 for i in ids}
        for e in self.edges:
            indeg[e.target] += 1
        roots = [i for i in ids if indeg[i] == 0]
        if len(roots) != 1:
            raise GraphInvalid(f"need exactly one node with in-degree 0, found {len(roots)}")
        # Kahn's algorithm, stable in declaration order
        order, ready, remaining = [], [roots[0]], dict(indeg)
        while ready:
            cur = ready.pop(0)
            order.append(cur)
            for e in self.edges:
                if e.base == cur:
                    remaining[e.target] -= 1
                    if remaining[e.target] == 0:
                        ready.append(e.target)
        if len(order) != len(ids):
            raise GraphInvalid("scene graph contains a cycle or is disconnected")
        self._topo = self._build_topology(order)

    def topology(self) -> Topology:
        if self._topo is None:
            self.validate()
        return self._topo

    def _build_topology(self, order):
        index = {nid: k for k, nid in enumerate(order)}
        eb = np.array([index[e.base] for e in self.edges], dtype=np.int64)
        et = np.array([index[e.target] for e in self.edges], dtype=np.int64)
        in_ptr = [0]
        in_edges = []
        for nid in order:
            in_edges += [i for i, e in enumerate(self.edges) if e.target == nid]
            in_ptr.append(len(in_edges))
        adj = {frozenset(e.key) for e in self.edges}
        pi, pj = [], []
        for a in range(len(order)):
            for b in range(a + 1, len(order)):
                if frozenset((order[a], order[b])) not in adj:
                    pi.append(a)
                    pj.append(b)
        root = order[0]
        root_node = self.node(root)
        fixed = root_node.fixed_scale is not None
        return Topology(
            order=list(order),
            node_index=index,
            edge_base=eb,
            edge_target=et,
            in_ptr=np.array(in_ptr, dtype=np.int64),
            in_edges=np.array(in_edges, dtype=np.int64),
            pair_i=np.array(pi, dtype=np.int64),
            pair_j=np.array(pj, dtype=np.int64),
            root_out=np.array([i for i, e in enumerate(self.edges) if e.base == root], dtype=np.int64),
            p3_edges=np.array([i for i, e in enumerate(self.edges) if e.base != root], dtype=np.int64),
            root_scale=root_node.fixed_scale.copy() if fixed else np.ones(3),
            root_scale_fixed=fixed,
        )


@dataclass
class NodePose:
    rot: np.ndarray
    trans: np.ndarray
    scale: np.ndarray


@dataclass
class SceneLayout:
    poses: dict  # node id -> NodePose

    def to_json(self, graph: SceneGraph):
        objs = []
        for n in graph.nodes:
            p = self.poses[n.id]
            objs.append({
                "id": n.id,
                "category": n.category,
                "R": p.rot.reshape(-1).tolist(),
                "t": p.trans.tolist(),
                "s": p.scale.tolist(),
            })
        return {"objects": objs}

    @classmethod
    def from_json(cls, d):
        poses = {}
        for o in d["objects"]:
            poses[o["id"]] = NodePose(
                np.reshape(np.asarray(o["R"], dtype=float), (3, 3)),
                np.asarray(o["t"], dtype=float),
                np.asarray(o["s"], dtype=float),
            )
        return cls(poses)


def edge_states(graph: SceneGraph, samples) -> np.ndarray:
    """(E, 15) array aligned with ``graph.edges`` from a mapping or a sequence.

    Mapping keys are ``(base, target)`` tuples; values are OORSamples or 15-vectors.
    """
    if isinstance(samples, np.ndarray):
        arr = np.asarray(samples, dtype=float)
        if arr.shape != (len(graph.edges), 15):
            raise GraphInvalid(f"expected ({len(graph.edges)}, 15) states, got {arr.shape}")
        return arr
    out = np.zeros((len(graph.edges), 15))
    for i, e in enumerate(graph.edges):
        if isinstance(samples, dict):
            if e.key not in samples:
                raise GraphInvalid(f"missing sample for edge {e.key}")
            v = samples[e.key]
        else:
            v = samples[i]
        out[i] = v.to_state() if isinstance(v, OORSample) else np.asarray(v, dtype=float)
    return out


def _root_scale(topo: Topology, states):
    if topo.root_scale_fixed:
        return topo.root_scale.copy()
    if len(topo.root_out):
        return states[topo.root_out, 12:15].mean(axis=0)
    return np.ones(3)


def _derive(topo: Topology, states):
    """Per node: list of parent-derived (R, t, S) and the resolved pose."""
    rots = [rot6d_to_matrix(v[:6]) for v in states]
    poses = {0: (np.eye(3), np.zeros(3), _root_scale(topo, states))}
    derived = {}
    for k in range(1, topo.n_nodes):
        cands = []
        for e in topo.in_edges[topo.in_ptr[k]:topo.in_ptr[k + 1]]:
            rp, tp, sp = poses[int(topo.edge_base[e])]
            v = states[e]
            ratio = np.mean(sp / v[12:15])
            cands.append((rp @ rots[e], rp @ (ratio * v[6:9]) + tp, ratio * v[9:12]))
        derived[k] = cands
        if len(cands) == 1:
            poses[k] = cands[0]
        else:
            poses[k] = (
                project_to_so3(np.mean([c[0] for c in cands], axis=0)),
                np.mean([c[1] for c in cands], axis=0),
                np.mean([c[2] for c in cands], axis=0),
            )
    return poses, derived


def compose_scene(graph: SceneGraph, samples) -> SceneLayout:
    topo = graph.topology()
    states = edge_states(graph, samples)
    poses, _ = _derive(topo, states)
    return SceneLayout({nid: NodePose(*poses[k]) for k, nid in enumerate(topo.order)})


def collision_loss(graph: SceneGraph, layout: SceneLayout) -> float:
    """Summed world-AABB overlap volume over node pairs that share no edge."""
    topo = graph.topology()
    total = 0.0
    for a, b in zip(topo.pair_i, topo.pair_j):
        pa = layout.poses[topo.order[a]]
        pb = layout.poses[topo.order[b]]
        total += aabb_overlap_volume(
            aabb_of_placed(pa.scale, pa.rot, pa.trans), aabb_of_placed(pb.scale, pb.rot, pb.trans)
        )
    return total


def inconsistency_parts(graph: SceneGraph, samples):
    """The three variance terms (root scale, multi-parent pose, parent scale ratio)."""
    topo = graph.topology()
    states = edge_states(graph, samples)
    poses, derived = _derive(topo, states)
    p1 = 0.0
    if len(topo.root_out) > 1:
        p1 = float(np.sum(np.var(states[topo.root_out, 12:15], axis=0)))
    p2 = 0.0
    for cands in derived.values():
        if len(cands) > 1:
            flat = np.array([np.concatenate([matrix_to_rot6d(r), t, s]) for r, t, s in cands])
            p2 += float(np.sum(np.var(flat, axis=0)))
    p3 = 0.0
    for e in topo.p3_edges:
        sp = poses[int(topo.edge_base[e])][2]
        p3 += float(np.var(sp / states[e, 12:15]))
    return p1, p2, p3


def inconsistency_loss(graph: SceneGraph, samples) -> float:
    return float(np.mean(inconsistency_parts(graph, samples)))


def layout_to_states(graph: SceneGraph, layout: SceneLayout) -> np.ndarray:
    """Per-edge states reproducing a layout exactly under ``compose_scene``."""
    out = np.zeros((len(graph.edges), 15))
    for i, e in enumerate(graph.edges):
        p, c = layout.poses[e.base], layout.poses[e.target]
        rel = p.rot.T @ c.rot
        out[i] = np.concatenate([
            matrix_to_rot6d(rel), p.rot.T @ (c.trans - p.trans), c.scale, p.scale,
        ])
    return out
