"""DTW distances, Ward agglomeration and silhouette-based choice of the mode count."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .geo import Trajectory
from .preprocess import WEATHER_FEATURES, NormalizationStats

POSITION_DIMS = ("lon", "lat", "alt")
DEFAULT_DIMS = POSITION_DIMS + WEATHER_FEATURES
DEFAULT_K_RANGE = (2, 10)


class ClusteringError(ValueError):
    pass


# --- DTW -----------------------------------------------------------------------


@numba.njit(cache=True)
def _accumulated_cost(x, y):
    n, m = x.shape[0], y.shape[0]
    acc = np.full((n, m), np.inf)
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(x.shape[1]):
                d = x[i, k] - y[j, k]
                s += d * d
            c = s
            if i == 0 and j == 0:
                acc[i, j] = c
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
            if i > 0 and acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if j > 0 and acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = best + c
    return acc


@numba.njit(cache=True)
def _dtw_cost(x, y):
    # two-row version of _accumulated_cost for the distance matrix fill
    n, m = x.shape[0], y.shape[0]
    prev = np.full(m, np.inf)
    cur = np.full(m, np.inf)
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(x.shape[1]):
                d = x[i, k] - y[j, k]
                s += d * d
            c = s
            if i == 0 and j == 0:
                cur[j] = c
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = prev[j - 1]
            if i > 0 and prev[j] < best:
                best = prev[j]
            if j > 0 and cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = best + c
        prev, cur = cur, prev
    return math.sqrt(prev[m - 1])


def dtw_arrays(x, y) -> tuple[float, list[tuple[int, int]]]:
    """DTW cost and optimal alignment path between point sequences (n, d) and (m, d).

    The path cost is the Euclidean norm of all aligned point differences,
    i.e. the square root of the summed squared point distances, which keeps
    the normalised distance comparable across sequence lengths. Backtracking
    prefers the diagonal predecessor, then (i-1, j), then (i, j-1).
    """
    x = np.ascontiguousarray(x, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if len(x) == 0 or len(y) == 0:
        raise ClusteringError("DTW needs non-empty sequences")
    if x.shape[1] != y.shape[1]:
        raise ClusteringError("sequences have different dimensionality")
    acc = _accumulated_cost(x, y)
    i, j = len(x) - 1, len(y) - 1
    path = [(i, j)]
    while i > 0 or j > 0:
        options = []
        if i > 0 and j > 0:
            options.append((acc[i - 1, j - 1], i - 1, j - 1))
        if i > 0:
            options.append((acc[i - 1, j], i - 1, j))
        if j > 0:
            options.append((acc[i, j - 1], i, j - 1))
        best = min(o[0] for o in options)
        _, i, j = next(o for o in options if o[0] == best)
        path.append((i, j))
    path.reverse()
    return math.sqrt(acc[-1, -1]), path


def dtw_cost_arrays(x, y) -> float:
    x = np.ascontiguousarray(x, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if len(x) == 0 or len(y) == 0:
        raise ClusteringError("DTW needs non-empty sequences")
    return float(_dtw_cost(x, y))


def trajectory_matrix(tr: Trajectory, dims: Sequence[str]) -> np.ndarray:
    cols = []
    for name in dims:
        if name in POSITION_DIMS:
            cols.append(tr.positions[:, POSITION_DIMS.index(name)])
        elif name == "t":
            cols.append(tr.times.astype(float))
        elif name in tr.feature_names:
            cols.append(tr.features[:, tr.feature_names.index(name)])
        else:
            raise ClusteringError(f"dimension {name!r} missing from trajectory {tr.id!r}")
    return np.column_stack(cols)


def fit_dtw_scaling(trajs: Sequence[Trajectory], dims: Sequence[str] = DEFAULT_DIMS) -> NormalizationStats:
    """Min-max ranges over a corpus; a constant dimension maps to 0 instead of failing."""
    x = np.concatenate([trajectory_matrix(t, dims) for t in trajs])
    lo, hi = x.min(axis=0), x.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    return NormalizationStats(tuple(dims), x.mean(axis=0), np.ones(len(dims)), lo, hi)


def _scaled(tr, dims, stats):
    m = trajectory_matrix(tr, dims)
    return m if stats is None else stats.minmax(m)


def dtw(a: Trajectory, b: Trajectory, dims: Sequence[str] = DEFAULT_DIMS,
        stats: NormalizationStats | None = None):
    """DTW between two trajectories over min-max scaled ``dims``.

    Without ``stats`` the scaling is fitted on the pair itself.
    """
    if stats is None:
        stats = fit_dtw_scaling([a, b], dims)
    return dtw_arrays(_scaled(a, dims, stats), _scaled(b, dims, stats))


def ndtw_arrays(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = x.shape[1] if x.ndim == 2 else 1
    return dtw_cost_arrays(x.reshape(len(x), d), y.reshape(len(y), d)) / math.sqrt(d * max(len(x), len(y)))


def ndtw(a: Trajectory, b: Trajectory, dims: Sequence[str] = DEFAULT_DIMS,
         stats: NormalizationStats | None = None) -> float:
    if stats is None:
        stats = fit_dtw_scaling([a, b], dims)
    return ndtw_arrays(_scaled(a, dims, stats), _scaled(b, dims, stats))


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (len(self.ids), len(self.ids)):
            raise ClusteringError("distance matrix shape does not match ids")
        if np.any(np.diag(v) != 0) or np.any(v < 0) or not np.array_equal(v, v.T):
            raise ClusteringError("distance matrix must be symmetric, non-negative, zero diagonal")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "ids", tuple(self.ids))

    def __len__(self):
        return len(self.ids)


def distance_matrix(trajs: Sequence[Trajectory], dims: Sequence[str] = DEFAULT_DIMS,
                    stats: NormalizationStats | None = None) -> DistanceMatrix:
    """Pairwise nDTW with one min-max scaling fitted on the whole corpus."""
    if stats is None:
        stats = fit_dtw_scaling(trajs, dims)
    mats = [_scaled(t, dims, stats) for t in trajs]
    n = len(mats)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = ndtw_arrays(mats[i], mats[j])
    return DistanceMatrix(tuple(t.id for t in trajs), out)


# --- agglomeration ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClusterModel:
    k: int
    labels: dict
    merges: tuple = ()
    silhouettes: dict = field(default_factory=dict)

    def label_array(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.labels[i] for i in ids], dtype=int)

    def members(self, cluster: int) -> list[str]:
        return [i for i, c in self.labels.items() if c == cluster]

    def to_json(self) -> str:
        doc = {
            "version": 1,
            "k": self.k,
            "labels": self.labels,
            "merges": [list(m) for m in self.merges],
            "silhouette": {str(k): v for k, v in sorted(self.silhouettes.items())},
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ClusterModel":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise ClusteringError("unsupported cluster model version")
        return cls(int(doc["k"]), {k: int(v) for k, v in doc["labels"].items()},
                   tuple(tuple(m) for m in doc["merges"]),
                   {int(k): float(v) for k, v in doc["silhouette"].items()})


def ward_merges(D: DistanceMatrix, stop_at: int = 1) -> list[tuple[int, int, float, int]]:
    """Ward merge sequence via the Lance-Williams recurrence on squared distances.

    Each merge is ``(slot_i, slot_j, height, new_size)`` with ``slot_i < slot_j``;
    the merged cluster keeps ``slot_i``. Ties go to the smallest ``(i, j)`` pair.
    """
    n = len(D)
    sq = D.values.astype(float) ** 2
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    merges = []
    for _ in range(n - stop_at):
        idx = np.flatnonzero(active)
        sub = sq[np.ix_(idx, idx)]
        iu = np.triu_indices(len(idx), 1)
        vals = sub[iu]
        # first occurrence in row-major upper-triangle order is the smallest (i, j)
        best = int(np.argmin(vals))
        i, j = int(idx[iu[0][best]]), int(idx[iu[1][best]])
        height = math.sqrt(vals[best])
        ni, nj = size[i], size[j]
        others = idx[(idx != i) & (idx != j)]
        nk = size[others]
        sq[i, others] = sq[others, i] = (
            (ni + nk) * sq[i, others] + (nj + nk) * sq[j, others] - nk * sq[i, j]
        ) / (ni + nj + nk)
        size[i] = ni + nj
        active[j] = False
        merges.append((i, j, height, int(size[i])))
    return merges


def _labels_from_merges(n: int, merges, k: int) -> np.ndarray:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j, _, _ in merges[: n - k]:
        parent[find(j)] = find(i)
    roots = [find(a) for a in range(n)]
    # cluster ids ordered by the smallest member index
    relabel = {}
    for r in roots:
        if r not in relabel:
            relabel[r] = len(relabel)
    return np.array([relabel[r] for r in roots], dtype=int)


def agglomerate(D: DistanceMatrix, k: int) -> ClusterModel:
    n = len(D)
    if not 1 <= k <= n:
        raise ClusteringError(f"need 1 <= K <= N, got K={k}, N={n}")
    merges = ward_merges(D, stop_at=k)
    labels = _labels_from_merges(n, merges, k)
    return ClusterModel(k, dict(zip(D.ids, labels.tolist())), tuple(merges))


def silhouette(D: DistanceMatrix | np.ndarray, labels) -> float:
    d = D.values if isinstance(D, DistanceMatrix) else np.asarray(D, dtype=float)
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise ClusteringError("silhouette needs at least two clusters")
    scores = np.zeros(len(labels))
    for p in range(len(labels)):
        own = labels == labels[p]
        if own.sum() == 1:
            continue
        a = d[p, own].sum() / (own.sum() - 1)
        b = min(d[p, labels == c].mean() for c in clusters if c != labels[p])
        m = max(a, b)
        scores[p] = 0.0 if m == 0 else (b - a) / m
    return float(scores.mean())


def select_k(D: DistanceMatrix, k_range=DEFAULT_K_RANGE) -> ClusterModel:
    """Cut the Ward hierarchy at each K in ``k_range`` (inclusive) and keep the best silhouette."""
    lo, hi = k_range
    ks = [k for k in range(lo, hi + 1) if 2 <= k <= len(D) - 1]
    if not ks:
        raise ClusteringError(f"empty K range {k_range} for N={len(D)}")
    merges = ward_merges(D, stop_at=min(ks))
    table = {}
    for k in ks:
        table[k] = silhouette(D, _labels_from_merges(len(D), merges, k))
    best = max(ks, key=lambda k: (table[k], -k))
    labels = _labels_from_merges(len(D), merges, best)
    return ClusterModel(best, dict(zip(D.ids, labels.tolist())), tuple(merges[: len(D) - best]), table)
