import json

import numpy as np
import pytest

from oor.errors import CorruptCheckpoint, FormatVersionMismatch, OutOfRange, UnknownContext
from oor.network import (
    ContextVocab,
    NetConfig,
    NoiseSchedule,
    ScoreNet,
    TrainConfig,
    dsm_loss,
    load_checkpoint,
    perturb,
    save_checkpoint,
    sigma,
    train,
)
from toys import MODE_A, TRIPLE_A

TRIPLE = ("on", "table", "cup")
PHI = np.r_[1, 0, 0, 0, 1, 0, 0.2, 0.3, -0.1, 0.5, 0.4, 0.3, 1, 1, 1.0]
TINY = NetConfig(hidden=8, depth=2, time_dim=4, cond_dim=3, zero_output=False)


def tiny_net(seed=0, triples=(TRIPLE,)):
    return ScoreNet(ContextVocab(triples), TINY, seed=seed)


# schedule ---------------------------------------------------------------

def test_sigma_endpoints():
    sched = NoiseSchedule()
    assert sigma(1.0, sched) == pytest.approx(50.0, rel=1e-12)
    assert NoiseSchedule(epsilon=1e-12).sigma(1e-12) == pytest.approx(0.01, rel=1e-9)


def test_sigma_strictly_increasing():
    sched = NoiseSchedule()
    s = sched.sigma(np.linspace(sched.epsilon, 1.0, 1000))
    assert np.all(np.diff(s) > 0)


def test_sigma_out_of_range():
    sched = NoiseSchedule()
    for t in (0.0, 1.5, np.nan):
        with pytest.raises(OutOfRange):
            sched.sigma(t)
    with pytest.raises(ValueError):
        NoiseSchedule(sigma_min=1.0, sigma_max=0.5)


def test_perturb_zero_noise():
    out = perturb(PHI, 0.5, NoiseSchedule(), z=np.zeros(15))
    assert np.array_equal(out, PHI)


def test_perturb_moments():
    sched = NoiseSchedule()
    t = 0.3
    s = sched.sigma(t)
    x = perturb(np.tile(PHI, (100_000, 1)), np.full(100_000, t), sched, np.random.default_rng(0))
    assert np.all(np.abs(x.mean(axis=0) - PHI) < 0.03 * s)
    assert np.all(np.abs(x.var(axis=0) / s**2 - 1) < 0.05)


# forward ----------------------------------------------------------------

def test_zero_output_layer_gives_zero_score():
    net = ScoreNet(ContextVocab([TRIPLE]), NetConfig(hidden=16, depth=2))
    assert np.array_equal(net.score(PHI, 0.5, TRIPLE), np.zeros(15))


def test_edm_zero_output_is_prior_score():
    sd = 0.5
    net = ScoreNet(ContextVocab([TRIPLE]), NetConfig(hidden=16, depth=2, precond="edm", sigma_data=sd))
    for t in (1e-5, 0.3, 1.0):
        s = net.schedule.sigma(t)
        assert np.allclose(net.score(PHI, t, TRIPLE), -PHI / (s**2 + sd**2), rtol=1e-12)


def test_net_config_validation():
    with pytest.raises(ValueError):
        NetConfig(precond="skip")
    with pytest.raises(ValueError):
        NetConfig(sigma_data=0.0)


def test_score_deterministic_and_finite():
    net = tiny_net()
    a = net.score(np.tile(PHI, (4, 1)), 0.2, TRIPLE)
    b = net.score(np.tile(PHI, (4, 1)), 0.2, TRIPLE)
    assert np.array_equal(a, b) and np.all(np.isfinite(a))


def test_unknown_context():
    with pytest.raises(UnknownContext):
        tiny_net().score(PHI, 0.5, ("under", "table", "cup"))


def test_vocab_dense_indices():
    vocab = ContextVocab([("a", "b", "c"), ("d", "e", "f"), ("a", "b", "c")])
    assert len(vocab) == 2 and sorted(vocab.index.values()) == [0, 1]
    with pytest.raises(ValueError):
        vocab.add(("a", "b"))


# loss -------------------------------------------------------------------

def test_dsm_zero_target_zero_prediction():
    net = ScoreNet(ContextVocab([TRIPLE]), NetConfig(hidden=8, depth=2))
    rng = np.random.default_rng(1)
    phi = PHI + rng.normal(size=15)
    assert dsm_loss(net, [(phi, TRIPLE)] * 3, t_draws=[0.1, 0.5, 0.9], phi_t=np.tile(phi, (3, 1))) == 0.0


def test_dsm_perfect_score():
    class Perfect:
        schedule = NoiseSchedule()

        def __init__(self, phi):
            self.phi = phi

        def context_index(self, c):
            return 0

        def score_batch(self, phi_t, t, cidx):
            return (self.phi - phi_t) / self.schedule.sigma(t)[:, None] ** 2

    rng = np.random.default_rng(2)
    z = rng.normal(size=(5, 15))
    loss = dsm_loss(Perfect(PHI), [(PHI, TRIPLE)] * 5, t_draws=rng.uniform(0.01, 1, 5), z=z)
    assert loss == pytest.approx(0.0, abs=1e-18)


def test_dsm_zero_net_equals_mean_norm_z():
    net = ScoreNet(ContextVocab([TRIPLE]), NetConfig(hidden=8, depth=2))
    rng = np.random.default_rng(3)
    z = rng.normal(size=(64, 15))
    loss = dsm_loss(net, [(PHI, TRIPLE)] * 64, t_draws=rng.uniform(1e-5, 1, 64), z=z)
    assert loss == pytest.approx(np.mean(np.sum(z**2, axis=1)), rel=1e-10)


@pytest.mark.parametrize("precond", ["residual", "edm"])
def test_gradient_matches_finite_differences(precond):
    cfg = NetConfig(hidden=8, depth=2, time_dim=4, cond_dim=3, zero_output=False, precond=precond,
                    sigma_data=0.5)
    net = ScoreNet(ContextVocab([TRIPLE, ("near", "a", "b")]), cfg, seed=4)
    rng = np.random.default_rng(4)
    phi = PHI + 0.1 * rng.normal(size=(6, 15))
    t = rng.uniform(0.05, 0.9, 6)
    phi_t = phi + net.schedule.sigma(t)[:, None] * rng.normal(size=phi.shape)
    cidx = np.array([0, 1, 0, 1, 1, 0])
    _, grads = net.loss_and_grad(phi, phi_t, t, cidx)
    params = net.parameters()
    h = 1e-6
    for name, p, g in zip(net.parameter_names(), params, grads):
        num = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up, _ = net.loss_and_grad(phi, phi_t, t, cidx)
            p[i] = old - h
            down, _ = net.loss_and_grad(phi, phi_t, t, cidx)
            p[i] = old
            num[i] = (up - down) / (2 * h)
        rel = np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12)
        assert rel < 1e-4, name


# training ---------------------------------------------------------------

def test_single_point_overfit():
    net = ScoreNet(ContextVocab([TRIPLE]), NetConfig(hidden=32, depth=2), seed=0)
    rng = np.random.default_rng(5)
    probe_t = rng.uniform(1e-5, 1, 256)
    probe_z = rng.normal(size=(256, 15))
    batch = [(PHI, TRIPLE)] * 256
    before = dsm_loss(net, batch, t_draws=probe_t, z=probe_z)
    train(net, [(PHI, TRIPLE)] * 16, TrainConfig(batch_size=16, epochs=500, lr=3e-3, seed=0))
    after = dsm_loss(net, batch, t_draws=probe_t, z=probe_z)
    assert after <= 0.5 * before


def test_training_determinism():
    data = [(PHI + 0.1 * np.random.default_rng(i).normal(size=15), TRIPLE) for i in range(40)]
    cfg = TrainConfig(batch_size=8, epochs=3, lr=1e-3, seed=7)
    a = train(tiny_net(), data, cfg).net.parameters()
    b = train(tiny_net(), data, cfg).net.parameters()
    c = train(tiny_net(), data, TrainConfig(batch_size=8, epochs=3, lr=1e-3, seed=8)).net.parameters()
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_holdout_loss_decreases():
    rng = np.random.default_rng(6)
    data = [(PHI + 0.1 * rng.normal(size=15), TRIPLE) for _ in range(400)]
    net = ScoreNet(ContextVocab([TRIPLE]), NetConfig(hidden=32, depth=2))
    res = train(net, data, TrainConfig(batch_size=32, epochs=20, lr=1e-3, holdout=0.2, seed=0))
    assert res.holdout_loss[-1] < res.holdout_loss[0]
    assert len(res.holdout_loss) == 21


def test_dirac_score_consistency():
    net = ScoreNet(ContextVocab([TRIPLE]), NetConfig(hidden=128, depth=3, cond_dim=8), seed=0)
    train(net, [(PHI, TRIPLE)] * 256,
          TrainConfig(batch_size=256, epochs=4000, lr=3e-3, lr_final=1e-5, grad_clip=None, seed=0))
    rng = np.random.default_rng(1)
    for t in (0.2, 0.3):
        s = net.schedule.sigma(t)
        phi_t = PHI + 0.5 * s * rng.normal(size=(100, 15))
        want = (PHI - phi_t) / s**2
        got = net.score_batch(phi_t, t, 0)
        rel = np.linalg.norm(got - want, axis=1) / np.linalg.norm(want, axis=1)
        assert rel.max() < 0.1, t


def test_gaussian_score_oracle(fidelity_net):
    """One std from the mode the score approaches (mu - phi_t) / (0.1^2 + sigma^2)."""
    net = fidelity_net
    t = 0.1
    s = net.schedule.sigma(t)
    rng = np.random.default_rng(2)
    phi_t = MODE_A + 0.1 * rng.normal(size=(50, 15))
    want = (MODE_A - phi_t) / (0.1**2 + s**2)
    got = net.score(phi_t, t, TRIPLE_A)
    rel = np.linalg.norm(got - want) / np.linalg.norm(want)
    assert rel < 0.2


# checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    net = tiny_net(seed=9, triples=[TRIPLE, ("near", "a", "b")])
    path = tmp_path / "net.json"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(100, 15))
    t = rng.uniform(1e-5, 1, 100)
    for i in range(2):
        assert np.array_equal(net.score_batch(x, t, i), back.score_batch(x, t, i))
    assert back.vocab.triples == net.vocab.triples
    assert back.schedule == net.schedule


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "net.json"
    save_checkpoint(tiny_net(), path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_wrong_version(tmp_path):
    path = tmp_path / "net.json"
    save_checkpoint(tiny_net(), path)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatVersionMismatch):
        load_checkpoint(path)


def test_checkpoint_bad_shape(tmp_path):
    path = tmp_path / "net.json"
    save_checkpoint(tiny_net(), path)
    doc = json.loads(path.read_text())
    doc["layers"][1]["shape"] = [1, -1]
    path.write_text(json.dumps(doc))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
