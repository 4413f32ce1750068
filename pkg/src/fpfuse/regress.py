"""Coordinate regressors: multi-target CART random forest and weighted kNN.

The forest predicts both coordinates with one set of trees (split quality is
the summed per-coordinate variance reduction). The kNN index pre-divides every
feature by its channel std so Euclidean search in the scaled space equals the
diagonal Mahalanobis distance; queries go through an exact kd-tree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .datamodel import Position
from .preprocess import ChannelVariances

_PURITY_EPS = 1e-12  # stop splitting once a node's target variance is gone


@dataclass(frozen=True)
class RfConfig:
    n_trees: int = 200
    max_depth: int | None = 28
    max_features: int | None = None  # None -> ceil(sqrt(n_features))
    min_leaf: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.min_leaf < 1:
            raise ValueError("n_trees and min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")


class _Tree:
    """Flat node arrays: feature < 0 marks a leaf holding its target mean."""

    __slots__ = ("feature", "threshold", "left", "right", "leaf_xy")

    def __init__(self, feature, threshold, left, right, leaf_xy):
        self.feature = np.asarray(feature, dtype=np.int32)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.leaf_xy = np.asarray(leaf_xy, dtype=float)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        node = np.zeros(len(X), dtype=np.int32)
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                break
            rows = np.nonzero(active)[0]
            go_right = X[rows, feat[rows]] > self.threshold[node[rows]]
            node[rows] = np.where(go_right, self.right[node[rows]],
                                  self.left[node[rows]])
        return self.leaf_xy[node]

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(),
                "threshold": self.threshold.tolist(),
                "left": self.left.tolist(),
                "right": self.right.tolist(),
                "leaf_xy": self.leaf_xy.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "_Tree":
        return cls(d["feature"], d["threshold"], d["left"], d["right"],
                   d["leaf_xy"])


@dataclass(frozen=True, eq=False)
class RfModel:
    config: RfConfig
    n_features: int
    trees: tuple[_Tree, ...]

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError("query dimension does not match training data")
        acc = np.zeros((len(X), 2))
        for tree in self.trees:
            acc += tree.predict(X)
        return acc / len(self.trees)

    def to_dict(self) -> dict:
        return {"n_features": self.n_features,
                "config": {"n_trees": self.config.n_trees,
                           "max_depth": self.config.max_depth,
                           "max_features": self.config.max_features,
                           "min_leaf": self.config.min_leaf,
                           "seed": self.config.seed},
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "RfModel":
        cfg = RfConfig(**d["config"])
        trees = tuple(_Tree.from_dict(t) for t in d["trees"])
        return cls(cfg, d["n_features"], trees)


def _best_split(X, Y, idx, features, min_leaf):
    """Scan candidate features for the threshold minimizing child SSE."""
    best = None  # (cost, feature, threshold)
    n = len(idx)
    for f in features:
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs_s = xs[order]
        ys = Y[idx][order]
        csum = np.cumsum(ys, axis=0)
        csq = np.cumsum(ys * ys, axis=0)
        tot, totsq = csum[-1], csq[-1]
        pos = np.arange(1, n)
        nl = pos.astype(float)
        nr = (n - pos).astype(float)
        sse_l = (csq[:-1] - csum[:-1] ** 2 / nl[:, None]).sum(axis=1)
        sse_r = ((totsq - csq[:-1])
                 - (tot - csum[:-1]) ** 2 / nr[:, None]).sum(axis=1)
        cost = sse_l + sse_r
        valid = (xs_s[1:] > xs_s[:-1]) & (pos >= min_leaf) & (n - pos >= min_leaf)
        if not valid.any():
            continue
        cost = np.where(valid, cost, np.inf)
        j = int(np.argmin(cost))  # first minimum wins ties
        if best is None or cost[j] < best[0]:
            a, b = xs_s[j], xs_s[j + 1]
            thr = a + (b - a) / 2.0
            if not (a <= thr < b):  # adjacent floats: keep split non-empty
                thr = a
            best = (float(cost[j]), int(f), float(thr))
    return best


def _grow_tree(X, Y, boot_idx, cfg, mtry, rng):
    feature, threshold, left, right, leaf_xy = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf_xy.append((0.0, 0.0))
        return len(feature) - 1

    def build(idx, depth):
        node = new_node()
        y = Y[idx]
        mean = y.mean(axis=0)
        leaf_xy[node] = (float(mean[0]), float(mean[1]))
        sse = float(((y - mean) ** 2).sum())
        if (len(idx) < 2 * cfg.min_leaf or sse <= _PURITY_EPS
                or (cfg.max_depth is not None and depth >= cfg.max_depth)):
            return node
        cand = rng.choice(X.shape[1], size=mtry, replace=False)
        split = _best_split(X, Y, idx, cand, cfg.min_leaf)
        if split is None:
            return node
        _, f, thr = split
        mask = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = build(idx[mask], depth + 1)
        right[node] = build(idx[~mask], depth + 1)
        return node

    build(boot_idx, 0)
    return _Tree(feature, threshold, left, right, leaf_xy)


def train_rf(X: np.ndarray, Y: np.ndarray, config: RfConfig = RfConfig()) -> RfModel:
    """Fit a bootstrap ensemble of multi-target regression trees.

    Tree t draws its bootstrap and its per-node feature subsets from a
    generator seeded by (config.seed, t), so the forest is reproducible and
    independent of training order.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("need at least 2 training rows")
    if Y.shape != (len(X), 2):
        raise ValueError("targets must be an (M, 2) coordinate matrix")
    m, d = X.shape
    mtry = config.max_features or int(math.ceil(math.sqrt(d)))
    mtry = min(mtry, d)
    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng(
            np.random.SeedSequence(config.seed, spawn_key=(t,)))
        boot = rng.integers(0, m, size=m)
        trees.append(_grow_tree(X, Y, boot, config, mtry, rng))
    return RfModel(config, d, tuple(trees))


def predict_rf(model: RfModel, x: np.ndarray) -> Position:
    """Unweighted mean of the per-tree leaf means, per coordinate."""
    out = model.predict_batch(np.asarray(x, dtype=float).reshape(1, -1))[0]
    return Position(float(out[0]), float(out[1]))


@dataclass(frozen=True, eq=False)
class KnnIndex:
    """Exact k-nearest index over variance-scaled fingerprints."""

    points: np.ndarray  # unscaled, as given
    labels: np.ndarray  # (M, 2) coordinates
    metric: ChannelVariances
    _scale: np.ndarray = field(repr=False, default=None)
    _tree: cKDTree = field(repr=False, default=None)

    @property
    def m(self) -> int:
        return len(self.points)


def build_knn_index(X: np.ndarray, Y: np.ndarray,
                    metric: ChannelVariances) -> KnnIndex:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.shape != (len(X), 2):
        raise ValueError("need (M, D) points and (M, 2) labels")
    if metric.d != X.shape[1]:
        raise ValueError("metric dimension does not match points")
    scale = 1.0 / np.sqrt(metric.var)
    tree = cKDTree(X * scale)
    return KnnIndex(X, Y, metric, scale, tree)


def query_knn(index: KnnIndex, x: np.ndarray, k: int):
    """Return (squared Mahalanobis distances, indices) of the k nearest points.

    Exact ties are broken toward lower training index; a few extra neighbours
    are fetched so boundary ties resolve deterministically.
    """
    if k < 1 or k > index.m:
        raise ValueError(f"k must be in [1, {index.m}]")
    x = np.asarray(x, dtype=float)
    if x.shape != (index.points.shape[1],):
        raise ValueError("query dimension does not match index")
    kq = min(index.m, k + 16)
    dist, idx = index._tree.query(x * index._scale, k=kq)
    dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
    order = np.lexsort((idx, dist))[:k]
    return dist[order] ** 2, idx[order]


def predict_wknn(index: KnnIndex, x: np.ndarray, k: int,
                 eps: float = 1e-9) -> Position:
    """Inverse-distance-weighted mean of the k nearest labels.

    Weights are 1 / (delta + eps) with delta the squared scaled distance, so a
    coincident neighbour dominates with weight 1/eps.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    delta, idx = query_knn(index, x, k)
    w = 1.0 / (delta + eps)
    out = (w[:, None] * index.labels[idx]).sum(axis=0) / w.sum()
    return Position(float(out[0]), float(out[1]))


def predict_wknn_batch(index: KnnIndex, X: np.ndarray, k: int,
                       eps: float = 1e-9) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.array([predict_wknn(index, x, k, eps).xy for x in X])
