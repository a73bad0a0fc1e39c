"""Conditional score network over the 15-D OOR state, DSM training, checkpoints.

The state layout is ``[rot6d (6), trans (3), scale_tb (3), scale_b (3)]``.
The network is a plain numpy MLP with hand-written backpropagation. The state
input is scaled by ``1 / sqrt(sigma(t)^2 + sigma_data^2)``. The raw output
``F`` becomes a score in one of two ways:

- ``precond="residual"``: ``score = F / sigma(t)``, so a zero output is a zero
  score;
- ``precond="edm"``: ``score = (D - phi_t) / sigma(t)^2`` with the denoiser
  ``D = c_skip phi_t + c_out F``, ``c_skip = sigma_data^2 / (sigma^2 + sigma_data^2)``
  and ``c_out = sigma sigma_data / sqrt(sigma^2 + sigma_data^2)``. At high noise
  the network predicts the clean state directly, which keeps narrow
  distributions sharp.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .errors import CorruptCheckpoint, FormatVersionMismatch, OutOfRange, UnknownContext

STATE_DIM = 15
POSE_DIM = 9
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    epsilon: float = 1e-5

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not (0 < self.epsilon < 1):
            raise ValueError("need 0 < epsilon < 1")

    @property
    def log_ratio(self):
        return math.log(self.sigma_max / self.sigma_min)

    def check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.epsilon) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
            raise OutOfRange(f"t must lie in [{self.epsilon}, 1]")
        return t

    def sigma(self, t):
        t = self.check(t)
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t

    def sigma_dot(self, t):
        return self.sigma(t) * self.log_ratio


def sigma(t, sched: NoiseSchedule):
    s = sched.sigma(t)
    return float(s) if np.ndim(s) == 0 else s


def perturb(phi, t, sched: NoiseSchedule, rng=None, z=None):
    """phi + sigma(t) z with z ~ N(0, I) unless ``z`` is given."""
    phi = np.asarray(phi, dtype=float)
    if z is None:
        z = rng.standard_normal(phi.shape)
    s = np.asarray(sched.sigma(t), dtype=float)
    if s.ndim and phi.ndim > 1:
        s = s[:, None]
    return phi + s * z


Triple = tuple  # (context, base category, target category)


class ContextVocab:
    def __init__(self, triples=()):
        self.triples: list[Triple] = []
        self.index: dict[Triple, int] = {}
        for t in triples:
            self.add(t)

    def add(self, triple):
        triple = tuple(triple)
        if len(triple) != 3:
            raise ValueError("a context is a (context, base, target) triple")
        if triple not in self.index:
            self.index[triple] = len(self.triples)
            self.triples.append(triple)
        return self.index[triple]

    def lookup(self, triple):
        try:
            return self.index[tuple(triple)]
        except KeyError:
            raise UnknownContext(f"unknown context {tuple(triple)!r}") from None

    def __len__(self):
        return len(self.triples)

    def __contains__(self, triple):
        return tuple(triple) in self.index


@dataclass
class NetConfig:
    hidden: int = 256
    depth: int = 5
    time_dim: int = 64
    cond_dim: int = 64
    sigma_data: float = 1.0
    max_freq: float = 100.0
    zero_output: bool = True
    precond: str = "residual"

    def __post_init__(self):
        if self.precond not in ("residual", "edm"):
            raise ValueError(f"unknown preconditioning {self.precond!r}")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")

    @property
    def in_dim(self):
        return STATE_DIM + self.time_dim + self.cond_dim


def _silu(a):
    return a * expit(a)


def _silu_grad(a):
    s = expit(a)
    return s * (1.0 + a * (1.0 - s))


class ScoreNet:
    """MLP score model ``Psi(phi_t, t | context)``."""

    def __init__(self, vocab: ContextVocab, config: NetConfig = None,
                 schedule: NoiseSchedule = None, seed: int = 0):
        self.vocab = vocab
        self.config = config or NetConfig()
        self.schedule = schedule or NoiseSchedule()
        rng = np.random.default_rng(seed)
        cfg = self.config
        dims = [cfg.in_dim] + [cfg.hidden] * cfg.depth + [STATE_DIM]
        self.weights = []
        self.biases = []
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            if last and cfg.zero_output:
                w = np.zeros((fi, fo))
            else:
                w = rng.standard_normal((fi, fo)) * math.sqrt(1.0 / fi)
            self.weights.append(w)
            self.biases.append(np.zeros(fo))
        self.cond_table = rng.standard_normal((max(len(vocab), 1), cfg.cond_dim))
        half = cfg.time_dim // 2
        self._freqs = np.geomspace(1.0, cfg.max_freq, half) if half else np.zeros(0)

    # parameter plumbing -------------------------------------------------
    def parameters(self):
        return [self.cond_table] + [p for wb in zip(self.weights, self.biases) for p in wb]

    def parameter_names(self):
        names = ["cond_table"]
        for i in range(len(self.weights)):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        return names

    def set_parameters(self, params):
        params = [np.array(p, dtype=float) for p in params]
        self.cond_table = params[0]
        self.weights = params[1::2]
        self.biases = params[2::2]

    def copy(self):
        other = object.__new__(ScoreNet)
        other.vocab = self.vocab
        other.config = self.config
        other.schedule = self.schedule
        other._freqs = self._freqs
        other.set_parameters(self.parameters())
        return other

    # forward / backward -------------------------------------------------
    def time_embedding(self, t):
        ang = np.asarray(t, dtype=float)[:, None] * self._freqs[None, :]
        emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
        pad = self.config.time_dim - emb.shape[1]
        if pad:
            emb = np.concatenate([emb, np.zeros((len(emb), pad))], axis=1)
        return emb

    def _coefficients(self, sig):
        # score = a * phi_t + b * F
        sd = self.config.sigma_data
        if self.config.precond == "edm":
            v = sig**2 + sd**2
            return -1.0 / v, sd / (sig * np.sqrt(v))
        return np.zeros_like(sig), 1.0 / sig

    def _forward(self, phi_t, t, cidx):
        sig = self.schedule.sigma(t)
        c_in = 1.0 / np.sqrt(sig**2 + self.config.sigma_data ** 2)
        x = np.concatenate(
            [phi_t * c_in[:, None], self.time_embedding(t), self.cond_table[cidx]], axis=1
        )
        hs, pre = [x], []
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = h @ w + b
            pre.append(a)
            h = _silu(a)
            hs.append(h)
        out = h @ self.weights[-1] + self.biases[-1]
        return out, sig, (hs, pre)

    def raw_output(self, phi_t, t, cidx):
        out, _, _ = self._forward(phi_t, t, cidx)
        return out

    def score_batch(self, phi_t, t, cidx):
        phi_t = np.asarray(phi_t, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(phi_t),))
        cidx = np.broadcast_to(np.asarray(cidx, dtype=np.int64), (len(phi_t),))
        out, sig, _ = self._forward(phi_t, t, cidx)
        a, b = self._coefficients(sig)
        return a[:, None] * phi_t + b[:, None] * out

    def context_index(self, cond):
        return self.vocab.lookup(cond)

    def score(self, phi_t, t, cond):
        """Score for one state (15,) or a batch (B, 15) under a single context triple."""
        idx = self.context_index(cond)
        phi_t = np.asarray(phi_t, dtype=float)
        single = phi_t.ndim == 1
        batch = np.atleast_2d(phi_t)
        out = self.score_batch(batch, t, idx)
        return out[0] if single else out

    def _backward(self, cache, dout, cidx):
        hs, pre = cache
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        grads_w[-1] = hs[-1].T @ dout
        grads_b[-1] = dout.sum(axis=0)
        dh = dout @ self.weights[-1].T
        for i in range(len(self.weights) - 2, -1, -1):
            da = dh * _silu_grad(pre[i])
            grads_w[i] = hs[i].T @ da
            grads_b[i] = da.sum(axis=0)
            dh = da @ self.weights[i].T
        c0 = STATE_DIM + self.config.time_dim
        g_table = np.zeros_like(self.cond_table)
        np.add.at(g_table, cidx, dh[:, c0:])
        return [g_table] + [g for wb in zip(grads_w, grads_b) for g in wb]

    def loss_and_grad(self, phi, phi_t, t, cidx):
        """Weighted DSM loss (lambda_t = sigma^2) and its gradient for fixed noise draws."""
        out, sig, cache = self._forward(phi_t, t, cidx)
        s2 = (sig**2)[:, None]
        a, b = self._coefficients(sig)
        psi = a[:, None] * phi_t + b[:, None] * out
        resid = psi - (phi - phi_t) / s2
        n = len(phi)
        loss = float(np.sum(s2 * resid**2) / n)
        dpsi = 2.0 * s2 * resid / n
        grads = self._backward(cache, dpsi * b[:, None], cidx)
        return loss, grads


def dsm_loss(net, batch, t_draws=None, rng=None, z=None, phi_t=None):
    """Mean of sigma(t)^2 * ||Psi(phi_t, t|c) - (phi - phi_t)/sigma(t)^2||^2 over a batch.

    ``batch`` is a sequence of (state, context triple). ``t_draws`` defaults to
    uniform draws on (epsilon, 1). ``z`` or ``phi_t`` can be injected.
    """
    phi = np.stack([np.asarray(s, dtype=float) for s, _ in batch])
    cidx = np.array([net.context_index(c) for _, c in batch], dtype=np.int64)
    sched = net.schedule
    if t_draws is None:
        t_draws = rng.uniform(sched.epsilon, 1.0, size=len(phi))
    t = np.broadcast_to(np.asarray(t_draws, dtype=float), (len(phi),))
    sig = sched.sigma(t)[:, None]
    if phi_t is None:
        if z is None:
            z = rng.standard_normal(phi.shape)
        phi_t = phi + sig * z
    phi_t = np.asarray(phi_t, dtype=float)
    psi = net.score_batch(phi_t, t, cidx)
    resid = psi - (phi - phi_t) / sig**2
    return float(np.mean(np.sum(sig**2 * resid**2, axis=1)))


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-4
    epochs: int = 100
    seed: int = 0
    schedule: NoiseSchedule | None = None
    lr_final: float | None = None  # cosine decay target, None keeps lr constant
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0
    holdout: float = 0.0


@dataclass
class TrainResult:
    net: ScoreNet
    train_loss: list = field(default_factory=list)
    holdout_loss: list = field(default_factory=list)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.k = 0

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.k += 1
        c1 = 1.0 - self.b1**self.k
        c2 = 1.0 - self.b2**self.k
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def encode_dataset(net, dataset):
    states = np.stack([np.asarray(s, dtype=float) for s, _ in dataset])
    cidx = np.array([net.context_index(c) for _, c in dataset], dtype=np.int64)
    return states, cidx


def _holdout_loss(net, states, cidx, t, z):
    sig = net.schedule.sigma(t)[:, None]
    phi_t = states + sig * z
    loss, _ = net.loss_and_grad(states, phi_t, t, cidx)
    return loss


def train(net: ScoreNet, dataset, cfg: TrainConfig = None, log=None) -> TrainResult:
    """Adam on the DSM objective. Deterministic given ``cfg.seed``; mutates and returns ``net``."""
    cfg = cfg or TrainConfig()
    if not dataset:
        raise ValueError("empty dataset")
    if cfg.schedule is not None:
        net.schedule = cfg.schedule
    states, cidx = encode_dataset(net, dataset)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(net)
    n = len(states)
    hold = None
    if cfg.holdout > 0 and n > 1:
        perm = rng.permutation(n)
        k = max(1, int(round(cfg.holdout * n)))
        hidx, tidx = perm[:k], perm[k:]
        h_t = rng.uniform(net.schedule.epsilon, 1.0, size=k)
        h_z = rng.standard_normal((k, STATE_DIM))
        hold = (states[hidx], cidx[hidx], h_t, h_z)
        states, cidx = states[tidx], cidx[tidx]
        n = len(states)
        result.holdout_loss.append(_holdout_loss(net, *hold))

    params = net.parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = cfg.epochs * steps_per_epoch
    eps = net.schedule.epsilon
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            phi = states[idx]
            t = rng.uniform(eps, 1.0, size=len(idx))
            z = rng.standard_normal(phi.shape)
            phi_t = phi + net.schedule.sigma(t)[:, None] * z
            loss, grads = net.loss_and_grad(phi, phi_t, t, cidx[idx])
            if cfg.grad_clip is not None:
                gn = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if gn > cfg.grad_clip:
                    grads = [g * (cfg.grad_clip / gn) for g in grads]
            lr = cfg.lr
            if cfg.lr_final is not None and total > 1:
                frac = step / (total - 1)
                lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * frac))
            opt.step(params, grads, lr)
            epoch_loss += loss * len(idx)
            step += 1
        result.train_loss.append(epoch_loss / n)
        if hold is not None:
            result.holdout_loss.append(_holdout_loss(net, *hold))
        if log is not None:
            log(epoch, result.train_loss[-1])
    net.set_parameters(params)
    return result


# checkpoints ----------------------------------------------------------------

def _fmt_array(a):
    flat = np.asarray(a, dtype=float).reshape(-1)
    if not np.all(np.isfinite(flat)):
        raise ValueError("cannot serialise non-finite parameters")
    return "[" + ",".join(f"{v:.17g}" for v in flat) + "]"


def save_checkpoint(net: ScoreNet, path):
    header = {
        "version": CHECKPOINT_VERSION,
        "config": {"net": asdict(net.config), "schedule": asdict(net.schedule)},
        "vocab": [list(t) for t in net.vocab.triples],
    }
    parts = []
    for name, p in zip(net.parameter_names(), net.parameters()):
        parts.append(
            '{"name": %s, "shape": %s, "values": %s}'
            % (json.dumps(name), json.dumps(list(p.shape)), _fmt_array(p))
        )
    text = json.dumps(header)[:-1] + ', "layers": [' + ", ".join(parts) + "]}\n"
    with open(path, "w") as fh:
        fh.write(text)


def load_checkpoint(path) -> ScoreNet:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from None
    if not isinstance(doc, dict) or "version" not in doc:
        raise CorruptCheckpoint(f"{path}: missing version field")
    if doc["version"] != CHECKPOINT_VERSION:
        raise FormatVersionMismatch(
            f"{path}: checkpoint version {doc['version']!r}, expected {CHECKPOINT_VERSION}"
        )
    try:
        net_cfg = NetConfig(**doc["config"]["net"])
        sched = NoiseSchedule(**doc["config"]["schedule"])
        vocab = ContextVocab(tuple(t) for t in doc["vocab"])
        net = ScoreNet(vocab, net_cfg, sched)
        expected = net.parameter_names()
        layers = doc["layers"]
        if [l["name"] for l in layers] != expected:
            raise CorruptCheckpoint(f"{path}: unexpected layer list")
        params = []
        for layer, ref in zip(layers, net.parameters()):
            arr = np.array(layer["values"], dtype=float).reshape(layer["shape"])
            if arr.shape != ref.shape:
                raise CorruptCheckpoint(f"{path}: layer {layer['name']} has shape {arr.shape}")
            params.append(arr)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from None
    net.set_parameters(params)
    return net
