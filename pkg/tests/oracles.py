"""Independent reference computations shared by unit and acceptance tests."""

import math

import numpy as np


def gae_direct(rewards, values, gamma, lam):
    """Advantages as the lambda-weighted mix of k-step estimates, and bootstrapped returns.

    k-step estimates past the episode end collapse onto the full-length one,
    whose weights sum to the remaining lambda mass.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    n = len(r)
    adv, ret = np.zeros(n), np.zeros(n)
    for t in range(n):
        horizon = n - t
        est = []
        for k in range(1, horizon + 1):
            est.append(sum(gamma**i * r[t + i] for i in range(k)) + gamma**k * v[t + k] - v[t])
        weights = [(1 - lam) * lam ** (k - 1) for k in range(1, horizon)] + [lam ** (horizon - 1)]
        adv[t] = sum(w * e for w, e in zip(weights, est))
        ret[t] = est[-1] + v[t]
    return adv, ret


def random_spd(rng, n):
    b = rng.normal(size=(n, n))
    return b @ b.T / n + np.eye(n) * rng.uniform(0.1, 1.0)


def monotone_paths(n, m):
    """Every warping path from (0, 0) to (n-1, m-1) with unit steps."""
    def rec(i, j):
        if (i, j) == (n - 1, m - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                for rest in rec(a, b):
                    yield [(i, j)] + rest
    yield from rec(0, 0)


def brute_force_dtw(x, y):
    best = math.inf
    for path in monotone_paths(len(x), len(y)):
        s = 0.0
        for i, j in path:
            s = float(np.sum((x[i] - y[j]) ** 2)) + s
        best = min(best, s)
    return math.sqrt(best)


def random_pair(rng, max_len=6, dim=3):
    n, m = rng.integers(1, max_len + 1, size=2)
    return rng.random((n, dim)), rng.random((m, dim))
