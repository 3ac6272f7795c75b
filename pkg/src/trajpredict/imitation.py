"""Behavioural cloning, GAE, TRPO and the adversarial imitation training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import (
    MAX_LEN,
    OUT_OF_BOUNDS,
    REACHED_DEST,
    EnvConfig,
    PolicyActor,
    RolloutBatch,
    StartSampler,
    collect,
    seed_key,
)
from .nn import (
    AdamState,
    Discriminator,
    GaussianPolicy,
    Mlp,
    ValueNet,
    adam_step,
    log_sigmoid,
    make_discriminator,
    make_policy,
    make_value_net,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GailConfig:
    iterations: int = 1500
    batch_samples: int = 50000
    disc_epochs: int = 100
    disc_minibatch: int = 512
    disc_lr: float = 3e-4
    gamma: float = 0.995
    lam: float = 0.97
    max_kl: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_ratio: float = 0.5
    backtrack_steps: int = 10
    value_epochs: int = 5
    value_minibatch: int = 256
    value_lr: float = 1e-3
    normalize_advantages: bool = True

    def __post_init__(self):
        positive = ("iterations", "batch_samples", "disc_epochs", "disc_minibatch", "max_kl", "cg_iters",
                    "backtrack_ratio", "backtrack_steps", "value_epochs", "value_minibatch")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lambda must lie in [0, 1]")
        if self.cg_damping < 0:
            raise ValueError("cg_damping must be non-negative")


# --- behavioural cloning -------------------------------------------------------


@dataclass
class BCResult:
    policy: GaussianPolicy
    fold_mse: list
    best_fold: int


def _fit_mse(net: Mlp, x, y, epochs, lr, batch, rng):
    st = AdamState(lr=lr)
    theta = net.get_flat()
    n = len(x)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch):
            idx = perm[s: s + batch]
            err = net.forward(x[idx]) - y[idx]
            grads, _ = net.backward(x[idx], 2.0 * err / err.size)
            theta = adam_step(theta, Mlp.flatten_grads(grads), st)
            net.set_flat(theta)


def train_bc(states, actions, state_stats, action_stats, epochs: int = 100, folds: int = 10,
             seed: int = 0, lr: float = 1e-3, batch: int = 128, hidden=(100, 100)) -> BCResult:
    """MSE regression of the policy mean onto normalised demonstrated actions.

    One network is trained per cross-validation fold; the fold model with the
    lowest validation MSE is returned.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if len(states) == 0:
        raise ValueError("no demonstrations to clone")
    if len(states) < folds:
        raise ValueError(f"need at least {folds} demonstrations for {folds}-fold validation")
    x = state_stats.zscore(states)
    y = action_stats.zscore(actions)
    rng = np.random.default_rng(seed_key(seed, 0))
    parts = np.array_split(rng.permutation(len(x)), folds)
    best, best_mse, scores = None, np.inf, []
    for f in range(folds):
        val = parts[f]
        train = np.concatenate([parts[g] for g in range(folds) if g != f]) if folds > 1 else val
        policy = make_policy(state_stats, action_stats, hidden, rng=np.random.default_rng(seed_key(seed, 1, f)))
        _fit_mse(policy.mean_net, x[train], y[train], epochs, lr, batch,
                 np.random.default_rng(seed_key(seed, 2, f)))
        mse = float(np.mean((policy.mean_net.forward(x[val]) - y[val]) ** 2))
        scores.append(mse)
        log.debug("bc fold %d validation mse %.5f", f, mse)
        if mse < best_mse:
            best, best_mse = policy, mse
    return BCResult(best, scores, int(np.argmin(scores)))


# --- advantages -------------------------------------------------------------------


@dataclass
class AdvantageSeries:
    advantages: np.ndarray
    returns: np.ndarray


def gae(rewards, values, gamma: float, lam: float) -> AdvantageSeries:
    """Generalised advantage estimates by the backward recursion.

    ``values`` holds one entry per state including the final one (0 for a
    terminated episode). ``returns`` are discounted rewards-to-go bootstrapped
    from the final value.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if len(v) != len(r) + 1:
        raise ValueError("values must have exactly one more entry than rewards")
    adv = np.zeros(len(r))
    ret = np.zeros(len(r))
    acc = 0.0
    g = v[-1]
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        g = r[t] + gamma * g
        ret[t] = g
    return AdvantageSeries(adv, ret)


# --- discriminator ------------------------------------------------------------------


def discriminator_update(disc: Discriminator, policy_xa, expert_xa, epochs: int, adam: AdamState,
                         rng, minibatch: int = 512) -> float:
    """Cross-entropy training, policy samples labelled 1 and expert samples 0.

    Each epoch pairs every sample of the smaller set with an equally sized
    draw (with replacement) from the larger set, then sweeps shuffled
    minibatches. Returns the last epoch's mean loss.
    """
    policy_xa = np.asarray(policy_xa, dtype=float)
    expert_xa = np.asarray(expert_xa, dtype=float)
    if len(policy_xa) == 0 or len(expert_xa) == 0:
        raise ValueError("discriminator needs both policy and expert samples")
    small_is_policy = len(policy_xa) <= len(expert_xa)
    small, large = (policy_xa, expert_xa) if small_is_policy else (expert_xa, policy_xa)
    n = len(small)
    theta = disc.net.get_flat()
    loss = float("nan")
    for _ in range(epochs):
        draw = large[rng.integers(0, len(large), size=n)]
        pol, exp = (small, draw) if small_is_policy else (draw, small)
        xa = np.vstack([pol, exp])
        y = np.concatenate([np.ones(n), np.zeros(n)])
        perm = rng.permutation(2 * n)
        losses = []
        for s in range(0, 2 * n, minibatch):
            idx = perm[s: s + minibatch]
            l, g = disc.loss_and_grad(xa[idx], y[idx])
            theta = adam_step(theta, g, adam)
            disc.net.set_flat(theta)
            losses.append(l * len(idx))
        loss = sum(losses) / (2 * n)
    return loss


# --- TRPO -------------------------------------------------------------------------------


def conjugate_gradient(hvp: Callable, g, iters: int = 10, tol: float = 1e-10) -> np.ndarray:
    """Solve ``H x = g`` for symmetric positive-definite ``H`` given only ``hvp``."""
    g = np.asarray(g, dtype=float)
    x = np.zeros_like(g)
    r = g.copy()
    p = r.copy()
    rr = r @ r
    gnorm = math.sqrt(rr)
    if gnorm == 0.0:
        return x
    for _ in range(iters):
        if math.sqrt(rr) <= tol * gnorm:
            break
        hp = hvp(p)
        php = p @ hp
        if not np.isfinite(php) or php <= 0:
            if not np.isfinite(php):
                raise FloatingPointError("non-finite curvature in conjugate gradient")
            break
        alpha = rr / php
        x = x + alpha * p
        r = r - alpha * hp
        rr_new = r @ r
        if not np.isfinite(rr_new):
            raise FloatingPointError("non-finite residual in conjugate gradient")
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def mean_kl(policy: GaussianPolicy, mu_old, xn) -> float:
    """Batch mean of KL(old || new) for fixed-variance Gaussians."""
    mu = policy.mean(xn)
    return float(np.mean(np.sum((mu_old - mu) ** 2 / (2.0 * policy.std**2), axis=1)))


def fisher_vector_product(policy: GaussianPolicy, xn, v, damping: float = 0.0) -> np.ndarray:
    """Hessian of the mean KL at the current parameters times ``v`` (plus damping)."""
    jv = policy.mean_net.jvp(xn, v)
    grads, _ = policy.mean_net.backward(xn, jv / policy.std**2 / len(xn))
    return Mlp.flatten_grads(grads) + damping * v


@dataclass
class TrpoInfo:
    accepted: bool
    kl: float
    improvement: float
    step_fraction: float
    grad_norm: float


def surrogate(policy: GaussianPolicy, xn, an, adv, logp_old) -> float:
    return float(np.mean(np.exp(policy.logprob(xn, an) - logp_old) * adv))


def natural_gradient(policy: GaussianPolicy, xn, an, adv, cfg: GailConfig):
    """Surrogate gradient and its conjugate-gradient natural direction."""
    g = policy.grad_logprob(xn, an, np.asarray(adv) / len(adv))
    direction = conjugate_gradient(lambda v: fisher_vector_product(policy, xn, v, cfg.cg_damping),
                                   g, cfg.cg_iters)
    return g, direction


def trpo_step(policy: GaussianPolicy, xn, an, adv, cfg: GailConfig):
    """KL-constrained natural-gradient ascent on the importance-ratio surrogate.

    ``xn``/``an`` are normalised states/actions; ``adv`` advantages to be
    maximised. Returns ``(new_policy, TrpoInfo)``; a rejected step returns an
    unchanged copy of ``policy``.
    """
    adv = np.asarray(adv, dtype=float)
    if len(adv) != len(xn) or len(adv) == 0:
        raise ValueError("advantages must align with a non-empty batch")
    old = policy.copy()
    logp_old = old.logprob(xn, an)
    mu_old = old.mean(xn)
    base = surrogate(old, xn, an, adv, logp_old)
    if not np.isfinite(base):
        raise FloatingPointError("non-finite surrogate")
    g, step = natural_gradient(old, xn, an, adv, cfg)
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        return old, TrpoInfo(False, 0.0, 0.0, 0.0, 0.0)
    shs = float(step @ fisher_vector_product(old, xn, step, cfg.cg_damping))
    if not shs > 0:
        return old, TrpoInfo(False, 0.0, 0.0, 0.0, gnorm)
    full = step * math.sqrt(2.0 * cfg.max_kl / shs)
    theta0 = old.mean_net.get_flat()
    cand = old.copy()
    frac = 1.0
    for _ in range(cfg.backtrack_steps):
        cand.mean_net.set_flat(theta0 + frac * full)
        value = surrogate(cand, xn, an, adv, logp_old)
        if not np.isfinite(value):
            raise FloatingPointError("non-finite surrogate during line search")
        kl = mean_kl(cand, mu_old, xn)
        if value - base > 0 and kl <= cfg.max_kl:
            return cand, TrpoInfo(True, kl, value - base, frac, gnorm)
        frac *= cfg.backtrack_ratio
    return old, TrpoInfo(False, 0.0, 0.0, 0.0, gnorm)


# --- value function -----------------------------------------------------------------------


def fit_value(vnet: ValueNet, xn, targets, epochs: int, adam: AdamState, rng, minibatch: int = 256) -> float:
    theta = vnet.net.get_flat()
    n = len(xn)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, minibatch):
            idx = perm[s: s + minibatch]
            _, g = vnet.loss_and_grad(xn[idx], targets[idx])
            theta = adam_step(theta, g, adam)
            vnet.net.set_flat(theta)
    return float(np.mean((vnet.predict(xn) - targets) ** 2))


# --- GAIL loop ------------------------------------------------------------------------------------


DIAGNOSTIC_COLUMNS = (
    "iteration", "n_episodes", "n_samples", "mean_episode_len", "frac_reached_dest",
    "frac_out_of_bounds", "frac_max_len", "d_policy", "d_expert", "disc_loss", "value_loss",
    "surrogate_gain", "kl", "accepted",
)


@dataclass
class GailResult:
    policy: GaussianPolicy
    value: ValueNet
    discriminator: Discriminator
    diagnostics: list = field(default_factory=list)
    trpo: list = field(default_factory=list)


def write_diagnostics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def batch_advantages(batch: RolloutBatch, disc: Discriminator, vnet: ValueNet, cfg: GailConfig):
    """Per-sample rewards -log D, GAE advantages and value targets, flattened."""
    advs, rets, rewards = [], [], []
    for e in batch.episodes:
        xa = disc.inputs(e.states[:-1], e.actions)
        r = -log_sigmoid(disc.logits(xa))
        v = vnet.predict(vnet.state_stats.zscore(e.states)) if len(e.states) else np.zeros(0)
        v = np.append(v[:-1], 0.0)  # every termination is treated as terminal
        series = gae(r, v, cfg.gamma, cfg.lam)
        advs.append(series.advantages)
        rets.append(series.returns)
        rewards.append(r)
    return np.concatenate(rewards), np.concatenate(advs), np.concatenate(rets)


def train_gail(expert_states, expert_actions, env: EnvConfig, sampler: StartSampler, cfg: GailConfig,
               policy: GaussianPolicy, seed: int = 0, callback: Callable | None = None) -> GailResult:
    """Adversarial imitation from an initial (behaviour-cloned) ``policy``.

    Each iteration: collect rollouts, update the discriminator, fit the
    critic on discounted returns, estimate GAE advantages with reward
    ``-log D`` and take one TRPO step. Diagnostics stream through ``callback``
    one dict per iteration.
    """
    expert_states = np.asarray(expert_states, dtype=float)
    expert_actions = np.asarray(expert_actions, dtype=float)
    if len(expert_states) == 0:
        raise ValueError("no expert samples")
    policy = policy.copy()
    rng = np.random.default_rng(seed_key(seed, 7))
    disc = make_discriminator(policy.state_stats, policy.action_stats, rng=np.random.default_rng(seed_key(seed, 8)))
    vnet = make_value_net(policy.state_stats, rng=np.random.default_rng(seed_key(seed, 9)))
    d_adam = AdamState(lr=cfg.disc_lr)
    v_adam = AdamState(lr=cfg.value_lr)
    expert_xa = disc.inputs(expert_states, expert_actions)
    result = GailResult(policy, vnet, disc)
    for it in range(cfg.iterations):
        batch = collect(PolicyActor(policy), env, cfg.batch_samples, seed_key(seed, 100, it), sampler,
                        action_dim=policy.action_dim)
        states, actions = batch.pairs()
        pol_xa = disc.inputs(states, actions)
        d_loss = discriminator_update(disc, pol_xa, expert_xa, cfg.disc_epochs, d_adam, rng, cfg.disc_minibatch)
        _, adv, ret = batch_advantages(batch, disc, vnet, cfg)
        xn = policy.norm_state(states)
        an = policy.norm_action(actions)
        v_loss = fit_value(vnet, xn, ret, cfg.value_epochs, v_adam, rng, cfg.value_minibatch)
        if cfg.normalize_advantages and adv.std() > 0:
            adv = (adv - adv.mean()) / adv.std()
        policy, info = trpo_step(policy, xn, an, adv, cfg)
        reasons = batch.reasons()
        row = {
            "iteration": it,
            "n_episodes": len(batch.episodes),
            "n_samples": batch.n_samples,
            "mean_episode_len": float(np.mean([len(e) for e in batch.episodes])),
            "frac_reached_dest": reasons.count(REACHED_DEST) / len(reasons),
            "frac_out_of_bounds": reasons.count(OUT_OF_BOUNDS) / len(reasons),
            "frac_max_len": reasons.count(MAX_LEN) / len(reasons),
            "d_policy": float(np.mean(disc.prob(pol_xa))),
            "d_expert": float(np.mean(disc.prob(expert_xa))),
            "disc_loss": d_loss,
            "value_loss": v_loss,
            "surrogate_gain": info.improvement,
            "kl": info.kl,
            "accepted": int(info.accepted),
        }
        result.diagnostics.append(row)
        result.trpo.append(info)
        if callback is not None:
            callback(row)
        log.info("gail it %d: len %.1f dest %.2f D(pi) %.3f D(E) %.3f kl %.4f",
                 it, row["mean_episode_len"], row["frac_reached_dest"], row["d_policy"],
                 row["d_expert"], info.kl)
    result.policy = policy
    return result
