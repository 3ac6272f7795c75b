import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from test_env import DEST, random_grid, traj
from trajpredict.env import EnvConfig, StartSampler, state_rows
from trajpredict.imitation import (
    GailConfig,
    conjugate_gradient,
    discriminator_update,
    gae,
    mean_kl,
    natural_gradient,
    train_bc,
    train_gail,
    trpo_step,
)
from trajpredict.nn import AdamState, GaussianPolicy, Mlp, make_discriminator, make_policy
from trajpredict.preprocess import fit_normalization


def test_defaults():
    c = GailConfig()
    assert (c.iterations, c.batch_samples, c.disc_epochs) == (1500, 50000, 100)
    assert (c.gamma, c.lam, c.max_kl, c.cg_iters, c.cg_damping) == (0.995, 0.97, 0.01, 10, 0.1)
    with pytest.raises(ValueError):
        GailConfig(gamma=1.2)
    with pytest.raises(ValueError):
        GailConfig(iterations=0)


# --- behavioural cloning ---------------------------------------------------------


def test_bc_recovers_linear_teacher(rng):
    s = rng.normal(size=(600, 3))
    a = s @ rng.normal(size=(3, 2)) + np.array([0.5, -1.0])
    res = train_bc(s, a, fit_normalization(s), fit_normalization(a), seed=1, lr=3e-3)
    assert len(res.fold_mse) == 10 and res.best_fold == int(np.argmin(res.fold_mse))
    assert min(res.fold_mse) < 1e-3


def test_bc_regresses_constant_pair(rng):
    ss = fit_normalization(rng.normal(size=(10, 2)))
    as_ = fit_normalization(rng.normal(size=(10, 2)))
    s = np.tile([0.3, -0.4], (20, 1))
    a = np.tile([1.5, 0.2], (20, 1))
    p = train_bc(s, a, ss, as_, epochs=100, folds=10, lr=1e-2, hidden=(8,)).policy
    assert np.allclose(p.denorm_action(p.mean(p.norm_state(s[:1])))[0], a[0], atol=1e-3)


def test_bc_errors(rng):
    ss = fit_normalization(rng.normal(size=(10, 2)))
    with pytest.raises(ValueError):
        train_bc(np.zeros((0, 2)), np.zeros((0, 2)), ss, ss)
    with pytest.raises(ValueError):
        train_bc(np.zeros((5, 2)), np.zeros((5, 2)), ss, ss, folds=10)


# --- GAE ---------------------------------------------------------------------------


@given(n=st.integers(1, 12), gamma=st.floats(0, 1), lam=st.floats(0, 1), seed=st.integers(0, 2**31))
def test_gae_matches_direct_series(n, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=n), rng.normal(size=n + 1)
    got = gae(r, v, gamma, lam)
    adv, ret = oracles.gae_direct(r, v, gamma, lam)
    assert np.allclose(got.advantages, adv, rtol=0, atol=1e-10)
    assert np.allclose(got.returns, ret, rtol=0, atol=1e-10)


def test_gae_closed_forms(rng):
    r, v = rng.normal(size=7), rng.normal(size=8)
    one_step = gae(r, v, 0.9, 0.0).advantages
    assert np.array_equal(one_step, r + 0.9 * v[1:] - v[:-1])
    v[-1] = 0.0
    mc = gae(r, v, 1.0, 1.0).advantages
    assert np.allclose(mc, np.cumsum(r[::-1])[::-1] - v[:-1], rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        gae(r, v[:-1], 0.9, 0.9)


# --- discriminator -----------------------------------------------------------------


def _disc(rng, d_s=2, d_a=1):
    x = rng.normal(size=(100, d_s + d_a))
    return make_discriminator(fit_normalization(x[:, :d_s]), fit_normalization(x[:, d_s:]), hidden=(16, 16), rng=rng)


def test_discriminator_separates_disjoint_clouds(rng):
    d = _disc(rng)
    pol = rng.normal(2.5, 0.5, size=(300, 3))
    exp = rng.normal(-2.5, 0.5, size=(500, 3))
    discriminator_update(d, pol, exp, 20, AdamState(lr=3e-3), rng, minibatch=64)
    assert d.prob(pol).mean() > 0.9 and d.prob(exp).mean() < 0.1


def test_discriminator_equilibrium_on_identical_distributions(rng):
    d = _disc(rng)
    pol, exp = rng.normal(size=(2000, 3)), rng.normal(size=(2000, 3))
    discriminator_update(d, pol, exp, 20, AdamState(lr=1e-3), rng, minibatch=128)
    held = rng.normal(size=(5000, 3))
    assert abs(d.prob(held).mean() - 0.5) <= 0.05


def test_discriminator_needs_both_sets(rng):
    with pytest.raises(ValueError):
        discriminator_update(_disc(rng), np.zeros((0, 3)), np.ones((3, 3)), 1, AdamState(), rng)


# --- conjugate gradient -------------------------------------------------------------


def test_cg_identity_and_zero(rng):
    g = rng.normal(size=6)
    assert np.allclose(conjugate_gradient(lambda v: v, g, iters=1), g)
    assert np.array_equal(conjugate_gradient(lambda v: v, np.zeros(6)), np.zeros(6))


@given(n=st.integers(1, 40), seed=st.integers(0, 2**31))
def test_cg_matches_dense_solve(n, seed):
    rng = np.random.default_rng(seed)
    a = oracles.random_spd(rng, n)
    g = rng.normal(size=n)
    x = conjugate_gradient(lambda v: a @ v, g, iters=2 * n, tol=1e-12)
    assert np.linalg.norm(a @ x - g) < 1e-6 * np.linalg.norm(g)
    assert np.allclose(x, np.linalg.solve(a, g), atol=1e-6 * np.linalg.norm(x))


def test_cg_rejects_non_finite(rng):
    with pytest.raises(FloatingPointError):
        conjugate_gradient(lambda v: v * np.nan, rng.normal(size=3))


# --- TRPO -----------------------------------------------------------------------------


def _linear_policy(rng, log_std=0.3):
    return GaussianPolicy(Mlp([1, 1], rng=rng), None, None, np.array([log_std]))


def test_natural_gradient_closed_form(rng):
    p = _linear_policy(rng)
    x = rng.normal(size=(50, 1))
    a = rng.normal(size=(50, 1))
    adv = rng.normal(size=50)
    cfg = GailConfig(cg_damping=0.1)
    g, direction = natural_gradient(p, x, a, adv, cfg)
    var = math.exp(0.6)
    feats = np.hstack([x, np.ones((50, 1))])
    mu = p.mean(x)
    g_ref = feats.T @ (adv * (a - mu)[:, 0] / var) / 50
    fisher = feats.T @ feats / (50 * var)
    assert np.allclose(g, g_ref, rtol=1e-10)
    ref = np.linalg.solve(fisher + 0.1 * np.eye(2), g_ref)
    assert np.linalg.norm(direction - ref) <= 1e-4 * np.linalg.norm(ref)


def test_zero_advantages_leave_policy_unchanged(rng):
    p = _linear_policy(rng)
    x = rng.normal(size=(20, 1))
    new, info = trpo_step(p, x, rng.normal(size=(20, 1)), np.zeros(20), GailConfig())
    assert not info.accepted and np.array_equal(new.mean_net.get_flat(), p.mean_net.get_flat())


@given(seed=st.integers(0, 2**31), max_kl=st.sampled_from([1e-3, 1e-2, 0.1]))
def test_accepted_steps_respect_trust_region(seed, max_kl):
    rng = np.random.default_rng(seed)
    ss = fit_normalization(rng.normal(size=(10, 3)))
    as_ = fit_normalization(rng.normal(size=(10, 2)))
    p = make_policy(ss, as_, hidden=(6,), rng=rng)
    x, a = rng.normal(size=(64, 3)), rng.normal(size=(64, 2))
    adv = rng.normal(size=64)
    new, info = trpo_step(p, x, a, adv, GailConfig(max_kl=max_kl))
    if info.accepted:
        assert mean_kl(new, p.mean(x), x) == pytest.approx(info.kl)
        assert info.kl <= max_kl and info.improvement >= 0


@given(seed=st.integers(0, 2**31))
def test_step_moves_mean_toward_advantaged_actions(seed):
    # actions above the mean in the first dimension are rewarded: the mean must rise there
    rng = np.random.default_rng(seed)
    p = make_policy(fit_normalization(rng.normal(size=(10, 3))), fit_normalization(rng.normal(size=(10, 2))),
                    hidden=(6,), rng=rng)
    x = rng.normal(size=(256, 3))
    a = p.mean(x) + p.std * rng.normal(size=(256, 2))
    adv = np.sign(a[:, 0] - p.mean(x)[:, 0])
    new, info = trpo_step(p, x, a, adv, GailConfig())
    assert info.accepted
    assert np.mean(new.mean(x)[:, 0] - p.mean(x)[:, 0]) > 0


# --- GAIL loop ------------------------------------------------------------------------


def _gail_inputs():
    rng = np.random.default_rng(0)
    trajs = [traj("a", 8), traj("b", 9, lon=-2.0, lat=40.2)]
    s = np.vstack([state_rows(t.positions, t.times, t.features)[:-1] for t in trajs])
    a = np.vstack([np.diff(t.positions, axis=0) for t in trajs]) + rng.normal(0, [1e-3, 1e-3, 5.0], size=(15, 3))
    ss = fit_normalization(np.vstack([state_rows(t.positions, t.times, t.features) for t in trajs]))
    p = make_policy(ss, fit_normalization(a), hidden=(8,), rng=rng)
    env = EnvConfig(DEST, random_grid(), max_len=20)
    return s, a, env, StartSampler(trajs), p


def test_train_gail_is_reproducible():
    s, a, env, sampler, p = _gail_inputs()
    cfg = GailConfig(iterations=3, batch_samples=60, disc_epochs=2)
    runs = [train_gail(s, a, env, sampler, cfg, p, seed=4) for _ in range(2)]
    assert runs[0].diagnostics == runs[1].diagnostics
    assert np.array_equal(runs[0].policy.mean_net.get_flat(), runs[1].policy.mean_net.get_flat())
    assert np.array_equal(p.mean_net.get_flat(), _gail_inputs()[4].mean_net.get_flat())
    for row, info in zip(runs[0].diagnostics, runs[0].trpo):
        assert row["n_samples"] >= 60 and 0 <= row["frac_reached_dest"] <= 1
        if info.accepted:
            assert info.kl <= cfg.max_kl and info.improvement >= 0
