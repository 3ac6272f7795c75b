"""Random forest classifier (bootstrap + Gini CART) for choosing a trajectory mode."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 20
    max_depth: int = 20
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_features: str | int = "sqrt"
    bootstrap: bool = True

    def n_candidates(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        if self.max_features in (None, "all"):
            return n_features
        return max(1, min(int(self.max_features), n_features))


@dataclass(eq=False)
class DecisionTree:
    """Flattened binary tree. ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    depth: np.ndarray

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def leaf_index(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            rows = np.flatnonzero(inner)
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def predict(self, X) -> np.ndarray:
        # argmax picks the lowest class on ties
        return np.argmax(self.counts[self.leaf_index(X)], axis=1)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
            "depth": self.depth.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "DecisionTree":
        return cls(
            np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=float),
            np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
            np.array(d["counts"], dtype=np.int64).reshape(len(d["feature"]), -1),
            np.array(d["depth"], dtype=np.int64),
        )


def _gini_split(x, y, n_classes, min_leaf):
    """Best threshold on one feature: returns (weighted impurity, threshold) or None."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(xs)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), ys] = 1.0
    left = np.cumsum(onehot, axis=0)[:-1]
    total = left[-1] + onehot[-1]
    right = total - left
    nl = np.arange(1, n, dtype=float)
    nr = n - nl
    valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
    if not valid.any():
        return None
    gl = 1.0 - np.sum((left / nl[:, None]) ** 2, axis=1)
    gr = 1.0 - np.sum((right / nr[:, None]) ** 2, axis=1)
    imp = (nl * gl + nr * gr) / n
    imp[~valid] = np.inf
    k = int(np.argmin(imp))
    return float(imp[k]), float((xs[k] + xs[k + 1]) / 2.0)


def grow_tree(X, y, n_classes, params: ForestParams, rng) -> DecisionTree:
    feature, threshold, left, right, counts, depth = [], [], [], [], [], []
    n_feat = X.shape[1]
    n_cand = params.n_candidates(n_feat)

    def new_node(rows, d):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[rows], minlength=n_classes))
        depth.append(d)
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y)), 0), np.arange(len(y)))]
    while stack:
        node, rows = stack.pop()
        d = depth[node]
        if d >= params.max_depth or len(rows) < params.min_samples_split:
            continue
        if np.count_nonzero(counts[node]) < 2:
            continue
        best = None
        tried = 0
        for f in rng.permutation(n_feat):
            col = X[rows, f]
            if col.min() == col.max():
                continue
            res = _gini_split(col, y[rows], n_classes, params.min_samples_leaf)
            tried += 1
            if res is not None and (best is None or res[0] < best[0]):
                best = (res[0], res[1], int(f))
            if tried >= n_cand:
                break
        if best is None:
            continue
        _, thr, f = best
        mask = X[rows, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left_rows, right_rows = rows[mask], rows[~mask]
        left[node] = new_node(left_rows, d + 1)
        right[node] = new_node(right_rows, d + 1)
        stack.append((right[node], right_rows))
        stack.append((left[node], left_rows))
    return DecisionTree(
        np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
        np.array(counts, dtype=np.int64).reshape(-1, n_classes), np.array(depth, dtype=np.int64),
    )


@dataclass(eq=False)
class ForestModel:
    trees: list
    n_classes: int
    feature_names: tuple[str, ...]
    params: ForestParams = field(default_factory=ForestParams)
    seed: int = 0
    oob_accuracy: float | None = None

    def votes(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.feature_names):
            raise ForestError(f"expected {len(self.feature_names)} features, got {X.shape[1]}")
        v = np.zeros((len(X), self.n_classes))
        for t in self.trees:
            v[np.arange(len(X)), t.predict(X)] += 1
        return v / len(self.trees)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.votes(X), axis=1)

    def to_json(self) -> str:
        doc = {
            "version": 1,
            "n_classes": self.n_classes,
            "feature_names": list(self.feature_names),
            "params": self.params.__dict__,
            "seed": self.seed,
            "oob_accuracy": self.oob_accuracy,
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise ForestError("unsupported forest model version")
        return cls([DecisionTree.from_dict(t) for t in doc["trees"]], int(doc["n_classes"]),
                   tuple(doc["feature_names"]), ForestParams(**doc["params"]), int(doc["seed"]),
                   doc.get("oob_accuracy"))


def _canonical_order(X, y):
    # bootstrap draws index a canonical row order, so input permutations do not matter
    keys = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def train_forest(X, y, params: ForestParams | None = None, seed: int = 0,
                 feature_names: Sequence[str] | None = None) -> ForestModel:
    params = params or ForestParams()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(y) < 2:
        raise ForestError("need matching X rows and labels, at least two")
    if len(np.unique(y)) < 2:
        raise ForestError("training labels contain a single class")
    if not np.all(np.isfinite(X)):
        raise ForestError("features must be finite")
    order = _canonical_order(X, y)
    X, y = X[order], y[order]
    n_classes = int(y.max()) + 1
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{i}" for i in range(X.shape[1]))
    trees = []
    oob_votes = np.zeros((len(y), n_classes))
    for k in range(params.n_trees):
        rng = np.random.default_rng([seed, k])
        if params.bootstrap:
            idx = rng.integers(0, len(y), size=len(y))
        else:
            idx = np.arange(len(y))
        tree = grow_tree(X[idx], y[idx], n_classes, params, rng)
        trees.append(tree)
        oob = np.setdiff1d(np.arange(len(y)), idx)
        if len(oob):
            oob_votes[oob, tree.predict(X[oob])] += 1
    seen = oob_votes.sum(axis=1) > 0
    oob_acc = float(np.mean(np.argmax(oob_votes[seen], axis=1) == y[seen])) if seen.any() else None
    return ForestModel(trees, n_classes, names, params, seed, oob_acc)


def predict_class(model: ForestModel, x) -> tuple[int, np.ndarray]:
    """Majority vote for one feature row; ties go to the lowest cluster id."""
    x = np.asarray(x, dtype=float).reshape(-1)
    frac = model.votes(x[None, :])[0]
    return int(np.argmax(frac)), frac


def cross_validate(X, y, grid: dict, folds: int = 5, seed: int = 0):
    """Exhaustive hyper-parameter search scored by mean k-fold accuracy.

    ``grid`` maps ForestParams field names to candidate lists. Returns
    ``(best_params, table)`` where table rows are ``(params, mean_accuracy)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    perm = np.random.default_rng(seed).permutation(len(y))
    parts = np.array_split(perm, folds)
    keys = sorted(grid)
    table = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        params = ForestParams(**dict(zip(keys, combo)))
        accs = []
        for f in range(folds):
            test = parts[f]
            train = np.concatenate([parts[g] for g in range(folds) if g != f])
            if len(np.unique(y[train])) < 2:
                continue
            m = train_forest(X[train], y[train], params, seed)
            accs.append(np.mean(m.predict(X[test]) == y[test]))
        table.append((params, float(np.mean(accs))))
    best = max(table, key=lambda r: r[1])[0]
    return best, table
