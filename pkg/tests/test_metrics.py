import numpy as np
import pytest

from oor.errors import DimensionMismatch, InsufficientSamples
from oor.metrics import GaussianStats, fd_between_sample_sets, frechet_distance, gaussian_stats
from oor.synthdata import ToyDistribution, sample_toy, sample_toy_states
from toys import MODE_A, gaussian


def test_gaussian_stats_hand_example():
    g = gaussian_stats([[0, 0], [2, 0]])
    assert np.array_equal(g.mean, [1, 0])
    assert np.array_equal(g.cov, [[2, 0], [0, 0]])
    assert g.n == 2


def test_gaussian_stats_constant_and_errors():
    g = gaussian_stats(np.tile([1.0, 2.0, 3.0], (10, 1)))
    assert np.array_equal(g.cov, np.zeros((3, 3)))
    with pytest.raises(InsufficientSamples):
        gaussian_stats([[1.0, 2.0]])


def test_gaussian_stats_monte_carlo():
    x = np.random.default_rng(0).standard_normal((100_000, 5))
    g = gaussian_stats(x)
    assert np.abs(g.mean).max() < 0.02
    assert np.linalg.norm(g.cov - np.eye(5)) < 0.05
    assert np.abs(g.cov - g.cov.T).max() < 1e-10
    assert np.linalg.eigvalsh(g.cov).min() >= -1e-10


def test_fd_identical_is_zero():
    g = gaussian_stats(np.random.default_rng(1).normal(size=(50, 4)))
    assert frechet_distance(g, g) == 0.0


def test_fd_one_dimensional():
    assert frechet_distance(GaussianStats([0.0], [[1.0]]), GaussianStats([1.0], [[1.0]])) == pytest.approx(1.0)


def test_fd_diagonal_two_dimensional():
    d = frechet_distance(GaussianStats([0, 0], np.eye(2)), GaussianStats([3, 4], 4 * np.eye(2)))
    assert d**2 == pytest.approx(27.0, abs=1e-10)


def test_fd_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        frechet_distance(GaussianStats([0, 0], np.eye(2)), GaussianStats([0], [[1.0]]))
    with pytest.raises(DimensionMismatch):
        GaussianStats([0, 0], np.eye(3))


def test_fd_symmetric():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = gaussian_stats(rng.normal(size=(30, 6)) @ rng.normal(size=(6, 6)))
        q = gaussian_stats(rng.normal(size=(30, 6)) @ rng.normal(size=(6, 6)) + 1)
        assert abs(frechet_distance(p, q) - frechet_distance(q, p)) < 1e-10


def test_fd_diagonal_closed_form():
    rng = np.random.default_rng(3)
    for _ in range(20):
        mp, mq = rng.normal(size=7), rng.normal(size=7)
        vp, vq = rng.uniform(0.1, 3, 7), rng.uniform(0.1, 3, 7)
        d2 = np.sum((mp - mq) ** 2) + np.sum((np.sqrt(vp) - np.sqrt(vq)) ** 2)
        got = frechet_distance(GaussianStats(mp, np.diag(vp)), GaussianStats(mq, np.diag(vq)))
        assert abs(got**2 - d2) < 1e-10


def test_fd_zero_only_for_equal_stats():
    p = GaussianStats(np.zeros(3), np.eye(3))
    assert frechet_distance(p, GaussianStats(np.zeros(3), np.eye(3))) == pytest.approx(0.0, abs=1e-12)
    assert frechet_distance(p, GaussianStats(np.zeros(3), np.diag([1, 1, 1.1]))) > 1e-3
    assert frechet_distance(p, GaussianStats([0, 0, 1e-2], np.eye(3))) > 1e-3


def test_fd_sample_sets_identical():
    a = sample_toy(gaussian(MODE_A), 100, np.random.default_rng(4))
    assert fd_between_sample_sets(a, a) == 0.0
    with pytest.raises(InsufficientSamples):
        fd_between_sample_sets(a[:1], a)


def _finite_sample_floor(k, n):
    # expected d^2 between two size-n fits of the same k-dim Gaussian: mean part + covariance part
    return np.sqrt((2 * k + k * (k + 1) / 2) / n)


@pytest.mark.parametrize("n,bound", [(1000, 1.3 * _finite_sample_floor(15, 1000)), (20_000, 0.1)])
def test_fd_same_generator_calibration(n, bound):
    dist = ToyDistribution("gaussian", {"mode": MODE_A, "std": 0.1})
    a = sample_toy_states(dist, n, np.random.default_rng(5))
    b = sample_toy_states(dist, n, np.random.default_rng(6))
    assert fd_between_sample_sets(a, b) < bound


def test_fd_planted_separation():
    # modes offset along translation x so that the jointly whitened separation is 1
    d = 0.1 / np.sqrt(0.75)
    mode_b = MODE_A.copy()
    mode_b[6] += d
    a = sample_toy_states(gaussian(MODE_A, 0.1, 0.1), 1000, np.random.default_rng(7))
    b = sample_toy_states(gaussian(mode_b, 0.1, 0.1), 1000, np.random.default_rng(8))
    assert fd_between_sample_sets(a, b) == pytest.approx(1.0, rel=0.2)
