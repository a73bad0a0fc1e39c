"""Analytic OOR distributions and planted registration scenes used as ground truth."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    OORSample,
    SimilarityTransform,
    TriMesh,
    box_mesh,
    canonicalize_mesh,
    compose_similarity,
    invert_similarity,
    matrix_to_rot6d,
    random_rotation,
    rot6d_to_matrix,
    rot_x,
    rot_y,
)
from .registration import FeatureCloud

KINDS = ("dirac", "gaussian", "on_top_of", "beside", "pour_into", "ring")


def _vec(x, default):
    return np.asarray(default if x is None else x, dtype=float).reshape(3)


@dataclass
class ToyDistribution:
    """A parametric OOR distribution.

    Parameters by kind (all optional unless noted):

    * ``dirac``: ``mode`` (15-state, required).
    * ``gaussian``: ``mode`` (15-state, required), ``std`` (scalar or 15-vector),
      ``orthonormalize`` (default true). Rotation noise is added to the 6D
      entries, which are re-orthonormalised unless ``orthonormalize`` is false;
      scales are drawn from the truncated (positive) Gaussian.
    * ``on_top_of``: ``s_b``, ``s_tb``, ``scale_std``; target rests on the top
      face, x/z uniform over it, yaw uniform.
    * ``beside``: ``s_b``, ``s_tb``, ``gap``, ``yaw_std``; target stands on the
      same ground plane next to the +x face, z uniform along it.
    * ``pour_into``: ``s_b``, ``s_tb``, ``radius``, ``height``, ``tilt``
      ([lo, hi] radians); target on a horizontal ring facing the centre, tilted
      forward.
    * ``ring``: as ``pour_into`` without tilt.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        std = self.params.get("std", 0.0)
        if np.any(np.asarray(std, dtype=float) < 0):
            raise ValueError("standard deviations must be non-negative")
        if self.kind in ("dirac", "gaussian") and "mode" not in self.params:
            raise ValueError(f"{self.kind} needs a mode state")

    def to_json(self):
        def conv(v):
            return v.tolist() if isinstance(v, np.ndarray) else v
        return {"kind": self.kind, **{k: conv(v) for k, v in self.params.items()}}

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        kind = d.pop("kind")
        return cls(kind, d)


def _mode_sample(mode):
    return OORSample.from_state(np.asarray(mode, dtype=float))


def _truncated_positive(mean, std, rng):
    out = mean + std * rng.standard_normal(mean.shape)
    bad = out <= 0
    while np.any(bad):
        out[bad] = (mean + std * rng.standard_normal(mean.shape))[bad]
        bad = out <= 0
    return out


def _scales(p, n, rng):
    s_b = np.tile(_vec(p.get("s_b"), (1.0, 1.0, 1.0)), (n, 1))
    s_tb = np.tile(_vec(p.get("s_tb"), (0.2, 0.2, 0.2)), (n, 1))
    sd = float(p.get("scale_std", 0.0))
    if sd > 0:
        s_b = _truncated_positive(s_b, sd, rng)
        s_tb = _truncated_positive(s_tb, sd, rng)
    return s_b, s_tb


def sample_toy_states(dist: ToyDistribution, n: int, rng) -> np.ndarray:
    """States (n, 15). The rotation block is the 6D form of a proper rotation,
    except for a gaussian with ``orthonormalize`` false."""
    p = dist.params
    if dist.kind == "dirac":
        s = _mode_sample(p["mode"]).to_state()
        return np.tile(s, (n, 1))
    if dist.kind == "gaussian":
        mode = np.asarray(p["mode"], dtype=float)
        std = np.broadcast_to(np.asarray(p.get("std", 0.1), dtype=float), (15,))
        out = np.tile(mode, (n, 1))
        out[:, :9] += std[:9] * rng.standard_normal((n, 9))
        out[:, 9:] = _truncated_positive(out[:, 9:], std[9:], rng)
        if np.any(std[:6] > 0) and p.get("orthonormalize", True):
            out[:, :6] = matrix_to_rot6d(rot6d_to_matrix(out[:, :6]))
        return out

    s_b, s_tb = _scales(p, n, rng)
    rot = np.zeros((n, 3, 3))
    trans = np.zeros((n, 3))
    if dist.kind == "on_top_of":
        yaw = rng.uniform(0.0, 2 * np.pi, size=n)
        u = rng.uniform(-0.5, 0.5, size=(n, 2))
        trans[:, 0] = u[:, 0] * s_b[:, 0]
        trans[:, 2] = u[:, 1] * s_b[:, 2]
        trans[:, 1] = 0.5 * (s_b[:, 1] + s_tb[:, 1])
        for i in range(n):
            rot[i] = rot_y(yaw[i])
    elif dist.kind == "beside":
        gap = float(p.get("gap", 0.05))
        yaw_std = float(p.get("yaw_std", 0.1))
        yaw = yaw_std * rng.standard_normal(n)
        trans[:, 0] = 0.5 * (s_b[:, 0] + s_tb[:, 0]) + gap
        trans[:, 1] = 0.5 * (s_tb[:, 1] - s_b[:, 1])
        trans[:, 2] = rng.uniform(-0.5, 0.5, size=n) * s_b[:, 2]
        for i in range(n):
            rot[i] = rot_y(yaw[i])
    else:  # pour_into / ring
        radius = float(p.get("radius", 0.6))
        height = float(p.get("height", 0.5))
        theta = rng.uniform(0.0, 2 * np.pi, size=n)
        if dist.kind == "pour_into":
            lo, hi = p.get("tilt", (0.3, 0.8))
            tilt = rng.uniform(lo, hi, size=n)
        else:
            tilt = np.zeros(n)
        trans[:, 0] = radius * np.cos(theta)
        trans[:, 1] = height
        trans[:, 2] = radius * np.sin(theta)
        # yaw so that the target's +z axis points at the ring centre
        yaw = np.arctan2(-np.cos(theta), -np.sin(theta))
        for i in range(n):
            rot[i] = rot_y(yaw[i]) @ rot_x(tilt[i])
    return np.concatenate([matrix_to_rot6d(rot), trans, s_tb, s_b], axis=1)


def sample_toy(dist: ToyDistribution, n: int, rng) -> list[OORSample]:
    return [OORSample.from_state(v) for v in sample_toy_states(dist, n, rng)]


# dataset spec / JSONL ---------------------------------------------------------

def dataset_records(spec: dict, rng):
    """Yield JSONL records for a generation spec.

    ``spec = {"contexts": [{"context", "base", "target", "n", "distribution": {...}}]}``
    """
    for entry in spec["contexts"]:
        dist = ToyDistribution.from_json(entry["distribution"])
        states = sample_toy_states(dist, int(entry["n"]), rng)
        for v in states:
            yield state_record(v, (entry["context"], entry["base"], entry["target"]))


def state_record(v, triple):
    v = np.asarray(v, dtype=float)
    return {
        "context": triple[0],
        "base": triple[1],
        "target": triple[2],
        "rot6d": v[:6].tolist(),
        "t": v[6:9].tolist(),
        "s_tb": v[9:12].tolist(),
        "s_b": v[12:15].tolist(),
    }


def record_state(rec):
    v = np.concatenate([rec["rot6d"], rec["t"], rec["s_tb"], rec["s_b"]]).astype(float)
    return v, (rec["context"], rec["base"], rec["target"])


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(path):
    return [record_state(r) for r in read_jsonl(path)]


# planted registration scenes -------------------------------------------------

def tapered_mesh(extents=(0.6, 1.0, 0.4), taper=0.5) -> TriMesh:
    """A box whose top face is shrunk and shifted: no rotational symmetry."""
    m = box_mesh(extents)
    v = m.vertices.copy()
    top = v[:, 1] > 0
    v[top, 0] = v[top, 0] * taper + 0.15 * extents[0]
    v[top, 2] *= 0.8
    return TriMesh(v, m.faces)


@dataclass
class PlantedRegistration:
    base_transform: SimilarityTransform | None = None  # None: random
    target_transform: SimilarityTransform | None = None
    noise_std: float = 0.0  # fraction of the object's cloud extent
    outlier_fraction: float = 0.0
    feature_dim: int = 128
    n_points: int = 400
    feature_freq: float = 3.0

    def __post_init__(self):
        if not (0.0 <= self.outlier_fraction < 1.0):
            raise ValueError("outlier fraction must lie in [0, 1)")


@dataclass
class FeatureScene:
    base_cloud: FeatureCloud
    target_cloud: FeatureCloud
    base_mesh: TriMesh
    target_mesh: TriMesh
    ground_truth: OORSample
    base_template: FeatureCloud
    target_template: FeatureCloud
    base_transform: SimilarityTransform
    target_transform: SimilarityTransform


class SmoothFeatures:
    """Random Fourier features of canonical position: f(x) = cos(W x + b)."""

    def __init__(self, dim, freq, rng):
        self.w = rng.standard_normal((3, dim)) * freq
        self.b = rng.uniform(0.0, 2 * np.pi, size=dim)

    def __call__(self, x):
        return np.cos(np.asarray(x, dtype=float) @ self.w + self.b)


def _random_similarity(rng):
    return SimilarityTransform(rng.uniform(0.5, 2.0), random_rotation(rng), rng.uniform(-1, 1, 3))


def _object_cloud(mesh, tf, spec, feat, rng):
    canon = mesh.sample_surface(spec.n_points, rng)
    template = FeatureCloud(canon, feat(canon))
    perm = rng.permutation(spec.n_points)
    pts = tf.apply(canon[perm])
    extent = tf.s * float(mesh.bbox().extents.max())
    if spec.noise_std > 0:
        pts = pts + rng.normal(0.0, spec.noise_std * extent, pts.shape)
    feats = feat(canon[perm])
    k = int(round(spec.outlier_fraction * spec.n_points))
    if k:
        bad = rng.choice(spec.n_points, size=k, replace=False)
        box = mesh.bbox()
        feats[bad] = feat(rng.uniform(box.min, box.max, size=(k, 3)))
    return FeatureCloud(pts, feats), template


def make_feature_scene(spec: PlantedRegistration, rng) -> FeatureScene:
    base_mesh, _ = canonicalize_mesh(box_mesh((1.0, 0.45, 0.7)))
    target_mesh, _ = canonicalize_mesh(tapered_mesh())
    t_b = spec.base_transform or _random_similarity(rng)
    t_t = spec.target_transform or _random_similarity(rng)
    feat = SmoothFeatures(spec.feature_dim, spec.feature_freq, rng)
    base_cloud, base_template = _object_cloud(base_mesh, t_b, spec, feat, rng)
    target_cloud, target_template = _object_cloud(target_mesh, t_t, spec, feat, rng)
    rel = compose_similarity(invert_similarity(t_b), t_t)
    gt = OORSample(rel.rot, rel.trans, rel.s * target_mesh.bbox().extents, base_mesh.bbox().extents)
    return FeatureScene(base_cloud, target_cloud, base_mesh, target_mesh, gt,
                        base_template, target_template, t_b, t_t)
