"""Small numpy feed-forward networks with exact gradients, Adam, and the policy/critic heads."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preprocess import NormalizationStats

LOG_STD = 0.9
HIDDEN = (100, 100)
LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class Mlp:
    """Dense network, tanh on hidden layers, linear output.

    Weights are stored as (fan_in, fan_out) so a batch ``x`` (n, fan_in)
    propagates as ``x @ W + b``.
    """

    def __init__(self, sizes, weights=None, biases=None, rng=None):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2:
            raise ShapeError("an Mlp needs at least input and output sizes")
        pairs = list(zip(self.sizes[:-1], self.sizes[1:]))
        if weights is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            weights = [rng.uniform(-1.0, 1.0, size=(a, b)) / math.sqrt(a) for a, b in pairs]
            biases = [np.zeros(b) for _, b in pairs]
        self.weights = [np.array(w, dtype=float).reshape(a, b) for w, (a, b) in zip(weights, pairs)]
        self.biases = [np.array(bb, dtype=float).reshape(b) for bb, (_, b) in zip(biases, pairs)]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.sizes[0]:
            raise ShapeError(f"expected input width {self.sizes[0]}, got {x.shape[-1]}")
        return x

    def _activations(self, x):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        return acts

    def forward(self, x) -> np.ndarray:
        return self._activations(self._check(x))[-1]

    def backward(self, x, grad_out):
        """Return ``(param_grads, input_grad)`` for upstream gradient ``grad_out``.

        ``param_grads`` is a list alternating weight and bias gradients, layer by layer.
        """
        x = self._check(x)
        acts = self._activations(x)
        g = np.asarray(grad_out, dtype=float).reshape(acts[-1].shape)
        grads = []
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            if k < last:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads.append(g.sum(axis=0))
            grads.append(acts[k].T @ g)
            g = g @ self.weights[k].T
        grads.reverse()
        return grads, g

    def jvp(self, x, direction) -> np.ndarray:
        """Directional derivative of the output along a flat parameter ``direction``."""
        x = self._check(x)
        dws, dbs = self._unflatten(direction)
        h, dh = x, np.zeros_like(x)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            dz = dh @ w + h @ dws[k] + dbs[k]
            if k < last:
                h = np.tanh(z)
                dh = dz * (1.0 - h**2)
            else:
                h, dh = z, dz
        return dh

    # --- flat parameter views -----------------------------------------------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for wb in zip(self.weights, self.biases) for p in wb])

    def set_flat(self, v) -> None:
        ws, bs = self._unflatten(v)
        self.weights = [w.copy() for w in ws]
        self.biases = [b.copy() for b in bs]

    def _unflatten(self, v):
        v = np.asarray(v, dtype=float)
        if v.size != self.n_params:
            raise ShapeError(f"flat vector has {v.size} entries, network has {self.n_params}")
        ws, bs, off = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(v[off: off + w.size].reshape(w.shape))
            off += w.size
            bs.append(v[off: off + b.size])
            off += b.size
        return ws, bs

    @staticmethod
    def flatten_grads(grads) -> np.ndarray:
        return np.concatenate([g.ravel() for g in grads])

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d) -> "Mlp":
        return cls(d["sizes"], d["weights"], d["biases"])


def mlp(n_in: int, n_out: int, hidden=HIDDEN, rng=None) -> Mlp:
    return Mlp([n_in, *hidden, n_out], rng=rng)


# --- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "t": self.t, "m": None if self.m is None else self.m.tolist(),
                "v": None if self.v is None else self.v.tolist()}

    @classmethod
    def from_dict(cls, d) -> "AdamState":
        return cls(d["lr"], d["beta1"], d["beta2"], d["eps"],
                   None if d["m"] is None else np.array(d["m"]),
                   None if d["v"] is None else np.array(d["v"]), d["t"])


def adam_step(params, grads, st: AdamState) -> np.ndarray:
    """One bias-corrected Adam descent step; advances ``st`` in place."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise ShapeError("parameter and gradient shapes differ")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient passed to Adam")
    if st.m is None:
        st.m = np.zeros_like(params)
        st.v = np.zeros_like(params)
    if st.m.shape != params.shape:
        raise ShapeError("Adam accumulators do not match the parameters")
    st.t += 1
    st.m = st.beta1 * st.m + (1.0 - st.beta1) * grads
    st.v = st.beta2 * st.v + (1.0 - st.beta2) * grads**2
    mhat = st.m / (1.0 - st.beta1**st.t)
    vhat = st.v / (1.0 - st.beta2**st.t)
    return params - st.lr * mhat / (np.sqrt(vhat) + st.eps)


# --- heads -------------------------------------------------------------------------


def _stats_dict(s):
    return None if s is None else s.to_dict()


def _stats_from(d):
    return None if d is None else NormalizationStats.from_dict(d)


@dataclass(eq=False)
class GaussianPolicy:
    """Diagonal Gaussian over normalised actions; the mean comes from ``mean_net``.

    ``log_std`` is fixed. Inputs and outputs of the network live in z-scored
    units given by ``state_stats`` / ``action_stats``.
    """

    mean_net: Mlp
    state_stats: NormalizationStats | None = None
    action_stats: NormalizationStats | None = None
    log_std: np.ndarray = field(default_factory=lambda: np.full(3, LOG_STD))

    def __post_init__(self):
        self.log_std = np.asarray(self.log_std, dtype=float).reshape(self.mean_net.sizes[-1])

    @property
    def action_dim(self) -> int:
        return self.mean_net.sizes[-1]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.mean_net.copy(), self.state_stats, self.action_stats, self.log_std.copy())

    def norm_state(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return s if self.state_stats is None else self.state_stats.zscore(s)

    def norm_action(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        return a if self.action_stats is None else self.action_stats.zscore(a)

    def denorm_action(self, a) -> np.ndarray:
        return a if self.action_stats is None else self.action_stats.unzscore(a)

    def mean(self, xn) -> np.ndarray:
        return self.mean_net.forward(xn)

    def logprob(self, xn, an) -> np.ndarray:
        """Log density of normalised actions ``an`` at normalised states ``xn``."""
        mu = self.mean(xn)
        z = (np.atleast_2d(an) - mu) / self.std
        return -0.5 * np.sum(z**2, axis=1) - np.sum(self.log_std) - 0.5 * self.action_dim * LOG_2PI

    def grad_logprob(self, xn, an, weights) -> np.ndarray:
        """Flat gradient of ``sum_i weights_i * logprob_i`` w.r.t. the mean network."""
        mu = self.mean(xn)
        g = (np.atleast_2d(an) - mu) / self.std**2 * np.asarray(weights, dtype=float).reshape(-1, 1)
        grads, _ = self.mean_net.backward(xn, g)
        return Mlp.flatten_grads(grads)

    def to_dict(self) -> dict:
        return {"kind": "gaussian_policy", "version": 1, "mean_net": self.mean_net.to_dict(),
                "log_std": self.log_std.tolist(), "state_stats": _stats_dict(self.state_stats),
                "action_stats": _stats_dict(self.action_stats)}

    @classmethod
    def from_dict(cls, d) -> "GaussianPolicy":
        return cls(Mlp.from_dict(d["mean_net"]), _stats_from(d["state_stats"]),
                   _stats_from(d["action_stats"]), np.array(d["log_std"]))


def make_policy(state_stats, action_stats, hidden=HIDDEN, log_std=LOG_STD, rng=None) -> GaussianPolicy:
    n_in = len(state_stats.names)
    n_out = len(action_stats.names)
    return GaussianPolicy(mlp(n_in, n_out, hidden, rng), state_stats, action_stats, np.full(n_out, log_std))


def policy_sample(p: GaussianPolicy, s, rng, deterministic: bool = False) -> np.ndarray:
    """Raw-unit action(s) for raw state feature row(s) ``s``."""
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    xn = p.norm_state(np.atleast_2d(s))
    mu = p.mean(xn)
    an = mu if deterministic else mu + p.std * rng.standard_normal(mu.shape)
    a = p.denorm_action(an)
    return a[0] if single else a


def policy_logprob(p: GaussianPolicy, s, a) -> np.ndarray:
    """Diagonal Gaussian log density, evaluated in normalised action units."""
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    out = p.logprob(p.norm_state(np.atleast_2d(s)), p.norm_action(np.atleast_2d(a)))
    return float(out[0]) if single else out


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def log_sigmoid(z):
    z = np.asarray(z, dtype=float)
    return np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))


@dataclass(eq=False)
class Discriminator:
    """Scores normalised (state, action) pairs; policy samples are pushed toward 1."""

    net: Mlp
    state_stats: NormalizationStats | None = None
    action_stats: NormalizationStats | None = None

    def inputs(self, s, a) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if self.state_stats is not None:
            s = self.state_stats.zscore(s)
        if self.action_stats is not None:
            a = self.action_stats.zscore(a)
        return np.hstack([s, a])

    def logits(self, xa) -> np.ndarray:
        return self.net.forward(xa)[:, 0]

    def prob(self, xa) -> np.ndarray:
        return sigmoid(self.logits(xa))

    def loss_and_grad(self, xa, labels):
        """Mean binary cross-entropy (label 1 = policy, 0 = expert) and its flat gradient."""
        labels = np.asarray(labels, dtype=float)
        z = self.logits(xa)
        loss = -np.mean(labels * log_sigmoid(z) + (1.0 - labels) * log_sigmoid(-z))
        g = (sigmoid(z) - labels) / len(labels)
        grads, _ = self.net.backward(xa, g[:, None])
        return float(loss), Mlp.flatten_grads(grads)

    def to_dict(self) -> dict:
        return {"kind": "discriminator", "version": 1, "net": self.net.to_dict(),
                "state_stats": _stats_dict(self.state_stats), "action_stats": _stats_dict(self.action_stats)}

    @classmethod
    def from_dict(cls, d) -> "Discriminator":
        return cls(Mlp.from_dict(d["net"]), _stats_from(d["state_stats"]), _stats_from(d["action_stats"]))


def make_discriminator(state_stats, action_stats, hidden=HIDDEN, rng=None) -> Discriminator:
    n_in = len(state_stats.names) + len(action_stats.names)
    return Discriminator(mlp(n_in, 1, hidden, rng), state_stats, action_stats)


@dataclass(eq=False)
class ValueNet:
    net: Mlp
    state_stats: NormalizationStats | None = None

    def predict(self, xn) -> np.ndarray:
        return self.net.forward(xn)[:, 0]

    def loss_and_grad(self, xn, targets):
        """Mean squared error against ``targets`` and its flat gradient."""
        targets = np.asarray(targets, dtype=float)
        err = self.predict(xn) - targets
        grads, _ = self.net.backward(xn, (2.0 * err / len(err))[:, None])
        return float(np.mean(err**2)), Mlp.flatten_grads(grads)

    def to_dict(self) -> dict:
        return {"kind": "value_net", "version": 1, "net": self.net.to_dict(),
                "state_stats": _stats_dict(self.state_stats)}

    @classmethod
    def from_dict(cls, d) -> "ValueNet":
        return cls(Mlp.from_dict(d["net"]), _stats_from(d["state_stats"]))


def make_value_net(state_stats, hidden=HIDDEN, rng=None) -> ValueNet:
    return ValueNet(mlp(len(state_stats.names), 1, hidden, rng), state_stats)


_KINDS = {"gaussian_policy": GaussianPolicy, "discriminator": Discriminator, "value_net": ValueNet}


def save_model(model, path) -> None:
    # json writes floats with repr, the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path):
    d = json.loads(Path(path).read_text())
    if d.get("version") != 1 or d.get("kind") not in _KINDS:
        raise ValueError(f"{path}: not a recognised network file")
    return _KINDS[d["kind"]].from_dict(d)
