"""Fréchet distance between Gaussian fits of sample sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InsufficientSamples
from .geometry import OORSample


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int = 0

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise DimensionMismatch(f"covariance shape {self.cov.shape} does not match mean of size {d}")

    @property
    def dim(self):
        return self.mean.shape[0]


def gaussian_stats(samples) -> GaussianStats:
    """Sample mean and unbiased (n - 1) covariance."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {x.shape[0]}")
    return GaussianStats(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False, ddof=1)), x.shape[0])


def _psd_sqrt(m):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance_squared(p: GaussianStats, q: GaussianStats) -> float:
    if p.dim != q.dim:
        raise DimensionMismatch(f"dimensions differ: {p.dim} vs {q.dim}")
    if np.array_equal(p.mean, q.mean) and np.array_equal(p.cov, q.cov):
        return 0.0
    diff = p.mean - q.mean
    root_p = _psd_sqrt(p.cov)
    inner = root_p @ q.cov @ root_p
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_cross = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    d2 = float(diff @ diff) + float(np.trace(p.cov) + np.trace(q.cov)) - 2.0 * tr_cross
    return max(d2, 0.0)


def frechet_distance(p: GaussianStats, q: GaussianStats) -> float:
    """d with d² = |mu_p - mu_q|² + tr(S_p + S_q - 2 (S_p S_q)^(1/2))."""
    return float(np.sqrt(frechet_distance_squared(p, q)))


def _as_states(samples):
    if isinstance(samples, np.ndarray):
        return np.asarray(samples, dtype=float)
    return np.array([s.to_state() if isinstance(s, OORSample) else np.asarray(s, dtype=float)
                     for s in samples])


def fd_between_sample_sets(a, b) -> float:
    """FD of 15-D states after whitening both sets by the union's mean and std."""
    xa, xb = _as_states(a), _as_states(b)
    if len(xa) < 2 or len(xb) < 2:
        raise InsufficientSamples("both sample sets need at least 2 samples")
    union = np.concatenate([xa, xb])
    mu = union.mean(axis=0)
    sd = union.std(axis=0)
    sd[sd == 0] = 1.0
    return frechet_distance(gaussian_stats((xa - mu) / sd), gaussian_stats((xb - mu) / sd))
