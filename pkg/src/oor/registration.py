"""Template-mesh registration into feature point clouds and OOR extraction.

Pipeline per object: joint PCA of cloud and template features, cosine
nearest-neighbour matching (cloud -> template), similarity Procrustes inside
RANSAC, point-to-point ICP refinement, Chamfer sanity check. Two registered
objects give the relative OOR sample via ``relative_oor``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    ConsensusFailure,
    DegenerateConfiguration,
    InsufficientPoints,
    InsufficientRank,
    NoCorrespondences,
    RegistrationRejected,
)
from .geometry import (
    Aabb,
    OORSample,
    SimilarityTransform,
    compose_similarity,
    invert_similarity,
)


@dataclass
class FeatureCloud:
    points: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2 or len(self.features) != len(self.points):
            raise ValueError("need one feature vector per point")

    def __len__(self):
        return len(self.points)

    def to_json(self):
        return {"points": self.points.tolist(), "features": self.features.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(np.asarray(d["points"], dtype=float), np.asarray(d["features"], dtype=float))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # (f_prime, F), orthonormal rows
    explained_variance: np.ndarray
    total_variance: float

    @property
    def f_prime(self):
        return self.basis.shape[0]

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) @ self.basis.T

    def inverse_transform(self, y):
        return np.asarray(y, dtype=float) @ self.basis + self.mean

    def explained_variance_ratio(self):
        return self.explained_variance / self.total_variance


def fit_pca(all_features, f_prime: int) -> PcaModel:
    x = np.asarray(all_features, dtype=float)
    n, f = x.shape
    if f_prime > f:
        raise InsufficientRank(f"f_prime={f_prime} exceeds feature dimension {f}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, sv, vt = np.linalg.svd(xc, full_matrices=False)
    rank = int(np.sum(sv > sv[0] * 1e-10)) if sv.size and sv[0] > 0 else 0
    if rank < f_prime:
        raise InsufficientRank(f"centered features have rank {rank} < f_prime={f_prime}")
    var = sv**2 / max(n - 1, 1)
    return PcaModel(mean, vt[:f_prime].copy(), var[:f_prime], float(var.sum()))


@dataclass
class CorrespondenceSet:
    src: np.ndarray
    dst: np.ndarray
    similarity: np.ndarray

    def __len__(self):
        return len(self.src)

    def swapped(self):
        return CorrespondenceSet(self.dst.copy(), self.src.copy(), self.similarity.copy())


def _unit_rows(y):
    n = np.linalg.norm(y, axis=1, keepdims=True)
    return np.divide(y, n, out=np.zeros_like(y), where=n > 0)


def match_features(src: FeatureCloud, dst: FeatureCloud, pca: PcaModel, threshold=0.7,
                   chunk=4096) -> CorrespondenceSet:
    """Per source point, the destination point of highest cosine similarity in PCA space."""
    if len(src) == 0 or len(dst) == 0:
        raise NoCorrespondences("empty feature cloud")
    a = _unit_rows(pca.transform(src.features))
    b = _unit_rows(pca.transform(dst.features))
    best = np.empty(len(a), dtype=np.int64)
    sim = np.empty(len(a))
    for lo in range(0, len(a), chunk):
        s = a[lo:lo + chunk] @ b.T
        j = np.argmax(s, axis=1)
        best[lo:lo + chunk] = j
        sim[lo:lo + chunk] = s[np.arange(len(j)), j]
    keep = sim >= threshold
    if not np.any(keep):
        raise NoCorrespondences(f"no match reaches cosine similarity {threshold}")
    return CorrespondenceSet(np.flatnonzero(keep), best[keep], sim[keep])


def _umeyama_batch(src, dst):
    """Batched closed-form similarity fit. src, dst: (B, n, 3).

    Returns s (B,), R (B,3,3), t (B,3), ok (B,) where ok flags non-degenerate
    (non-collinear source, non-collapsed destination) problems.
    """
    mu_s = src.mean(axis=1)
    mu_d = dst.mean(axis=1)
    xs = src - mu_s[:, None]
    yd = dst - mu_d[:, None]
    n = src.shape[1]
    cov = np.einsum("bni,bnj->bij", yd, xs) / n
    u, d, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    sign[sign == 0] = 1.0
    dd = np.ones((len(src), 3))
    dd[:, 2] = sign
    rot = (u * dd[:, None, :]) @ vt
    var_s = np.einsum("bni,bni->b", xs, xs) / n
    trace = np.einsum("bi,bi->b", d, dd)
    sv_src = np.linalg.svd(xs, compute_uv=False)
    ok = (sv_src[:, 1] > 1e-12 * np.maximum(sv_src[:, 0], 1e-300)) & (var_s > 0)
    s = np.where(ok, trace / np.where(var_s > 0, var_s, 1.0), 0.0)
    ok &= s > 0
    t = mu_d - s[:, None] * np.einsum("bij,bj->bi", rot, mu_s)
    return s, rot, t, ok


def procrustes_similarity(src, dst) -> SimilarityTransform:
    """Least-squares s, R, t minimising sum ||s R src_i + t - dst_i||^2 with det R = +1."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise DegenerateConfiguration("src and dst differ in length")
    if len(src) < 3:
        raise DegenerateConfiguration("need at least three point pairs")
    s, rot, t, ok = _umeyama_batch(src[None], dst[None])
    if not ok[0]:
        raise DegenerateConfiguration("collinear or collapsed point configuration")
    return SimilarityTransform(s[0], rot[0], t[0])


def residuals(tf: SimilarityTransform, src, dst):
    return np.linalg.norm(tf.apply(src) - np.asarray(dst, dtype=float), axis=1)


@dataclass
class RegistrationResult:
    transform: SimilarityTransform
    inlier_count: int
    rms_error: float
    rms_history: list = field(default_factory=list)

    def to_json(self):
        return {
            "transform": self.transform.to_json(),
            "inlier_count": int(self.inlier_count),
            "rms_error": float(self.rms_error),
        }


def ransac_register(corr: CorrespondenceSet, src, dst, iters=1000, inlier_tol=None,
                    rng=None, refine_rounds=3) -> RegistrationResult:
    """Similarity RANSAC over correspondences ``src[corr.src[k]] -> dst[corr.dst[k]]``.

    ``inlier_tol`` defaults to 5% of the destination bbox diagonal. The winning
    hypothesis is refit on its inliers (repeated ``refine_rounds`` times).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    m = len(corr)
    if m < 3:
        raise ConsensusFailure(f"only {m} correspondences")
    a = src[corr.src]
    b = dst[corr.dst]
    if inlier_tol is None:
        inlier_tol = 0.05 * Aabb.of_points(dst).diagonal

    # three distinct indices per hypothesis
    i0 = rng.integers(0, m, size=iters)
    i1 = (i0 + 1 + rng.integers(0, m - 1, size=iters)) % m
    i2 = rng.integers(0, m - 2, size=iters)
    lo, hi = np.minimum(i0, i1), np.maximum(i0, i1)
    i2 = i2 + (i2 >= lo)
    i2 = i2 + (i2 >= hi)
    idx = np.stack([i0, i1, i2], axis=1)

    s, rot, t, ok = _umeyama_batch(a[idx], b[idx])
    best_count, best_mask, best_cost = -1, None, np.inf
    chunk = max(1, 2_000_000 // (3 * m))
    for lo_h in range(0, iters, chunk):
        sl = slice(lo_h, lo_h + chunk)
        pred = s[sl, None, None] * np.einsum("bij,nj->bni", rot[sl], a) + t[sl, None, :]
        res = np.linalg.norm(pred - b[None], axis=2)
        inl = (res < inlier_tol) & ok[sl, None]
        counts = inl.sum(axis=1)
        cost = np.where(inl, res, 0.0).sum(axis=1)
        for k in np.flatnonzero(counts == counts.max()):
            if counts[k] > best_count or (counts[k] == best_count and cost[k] < best_cost):
                best_count, best_cost, best_mask = int(counts[k]), cost[k], inl[k].copy()
    if best_count < 3:
        raise ConsensusFailure(f"best consensus set has {max(best_count, 0)} inliers")

    mask = best_mask
    tf = None
    for _ in range(max(1, refine_rounds)):
        try:
            cand = procrustes_similarity(a[mask], b[mask])
        except DegenerateConfiguration:
            break
        new_mask = residuals(cand, a, b) < inlier_tol
        tf = cand
        if new_mask.sum() < 3 or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    if tf is None:
        raise ConsensusFailure("inlier set is degenerate")
    res = residuals(tf, a[mask], b[mask])
    return RegistrationResult(tf, int(mask.sum()), float(np.sqrt(np.mean(res**2))))


def icp_refine(init: SimilarityTransform, src, dst, max_iters=50, tol=1e-10) -> RegistrationResult:
    """Point-to-point similarity ICP; each dst point is associated to its nearest transformed src point.

    The RMS sequence in ``rms_history`` is non-increasing: a refit is only
    accepted when it lowers the error.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    tf = init

    def associate(t):
        d, nn = cKDTree(t.apply(src)).query(dst)
        return float(np.sqrt(np.mean(d**2))), nn

    rms, nn = associate(tf)
    history = [rms]
    for _ in range(max_iters):
        if rms == 0.0:
            break
        try:
            cand = procrustes_similarity(src[nn], dst)
        except DegenerateConfiguration:
            break
        cand_rms, cand_nn = associate(cand)
        if not cand_rms < rms:
            break
        improvement = rms - cand_rms
        tf, rms, nn = cand, cand_rms, cand_nn
        history.append(rms)
        if improvement < tol:
            break
    return RegistrationResult(tf, len(dst), rms, history)


def relative_oor(reg_base: RegistrationResult, reg_target: RegistrationResult,
                 bbox_base: Aabb, bbox_target: Aabb) -> OORSample:
    rel = compose_similarity(invert_similarity(reg_base.transform), reg_target.transform)
    return OORSample(rel.rot, rel.trans, rel.s * bbox_target.extents, bbox_base.extents.copy())


def chamfer_mesh_to_cloud(mesh_points, cloud_points):
    """Mean nearest-neighbour distance from (registered) mesh samples to the cloud."""
    d, _ = cKDTree(np.asarray(cloud_points, dtype=float)).query(np.asarray(mesh_points, dtype=float))
    return float(np.mean(d))


@dataclass
class RegistrationConfig:
    f_prime: int = 15
    threshold: float = 0.7
    ransac_iters: int = 1000
    inlier_tol: float | None = None  # None: 5% of cloud bbox diagonal
    icp_iters: int = 50
    icp_tol: float = 1e-10
    min_points: int = 100
    chamfer_factor: float = 0.1


def register_object(cloud: FeatureCloud, template: FeatureCloud, cfg: RegistrationConfig = None,
                    rng=None) -> RegistrationResult:
    """Register a template (canonical-space points + rendered features) into a cloud.

    The returned transform maps template canonical coordinates to cloud space.
    """
    cfg = cfg or RegistrationConfig()
    if rng is None:
        rng = np.random.default_rng(0)
    if len(cloud) < cfg.min_points:
        raise InsufficientPoints(f"cloud has {len(cloud)} points (< {cfg.min_points})")
    pca = fit_pca(np.vstack([cloud.features, template.features]), cfg.f_prime)
    corr = match_features(cloud, template, pca, cfg.threshold)
    coarse = ransac_register(corr.swapped(), template.points, cloud.points,
                             iters=cfg.ransac_iters, inlier_tol=cfg.inlier_tol, rng=rng)
    fine = icp_refine(coarse.transform, template.points, cloud.points, cfg.icp_iters, cfg.icp_tol)
    fine.inlier_count = coarse.inlier_count
    placed = fine.transform.apply(template.points)
    cd = chamfer_mesh_to_cloud(placed, cloud.points)
    limit = cfg.chamfer_factor * Aabb.of_points(placed).diagonal
    if cd > limit:
        raise RegistrationRejected(f"Chamfer distance {cd:.4g} exceeds {limit:.4g}")
    return fine


def extract_oor(base_cloud: FeatureCloud, target_cloud: FeatureCloud,
                base_template: FeatureCloud, target_template: FeatureCloud,
                bbox_base: Aabb, bbox_target: Aabb, cfg: RegistrationConfig = None, rng=None):
    """Register both templates and return ``(OORSample, reg_base, reg_target)``."""
    if rng is None:
        rng = np.random.default_rng(0)
    reg_b = register_object(base_cloud, base_template, cfg, rng)
    reg_t = register_object(target_cloud, target_template, cfg, rng)
    return relative_oor(reg_b, reg_t, bbox_base, bbox_target), reg_b, reg_t
