"""Comparator abstention rules: uncertainty thresholding, optionally with an isolation forest."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datasets import Dataset
from .trainer import TrainConfig, train_ulm

EULER_GAMMA = 0.5772156649015329
ERM_DELTA = 1e6


def average_path_length(n) -> np.ndarray | float:
    """Expected path length of an unsuccessful BST search among ``n`` points."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    big = n > 2
    out = np.where(n == 2, 1.0, out)
    nb = np.where(big, n, 3.0)
    out = np.where(big, 2.0 * (np.log(nb - 1.0) + EULER_GAMMA) - 2.0 * (nb - 1.0) / nb, out)
    return out if out.ndim else float(out)


class _Node:
    __slots__ = ("feature", "cut", "left", "right", "size")

    def __init__(self, size, feature=-1, cut=0.0, left=None, right=None):
        self.size = size
        self.feature = feature
        self.cut = cut
        self.left = left
        self.right = right


def _grow(X: np.ndarray, depth: int, limit: int, rng: np.random.Generator) -> _Node:
    n = X.shape[0]
    if depth >= limit or n <= 1:
        return _Node(n)
    lo, hi = X.min(axis=0), X.max(axis=0)
    splittable = np.flatnonzero(hi > lo)
    if splittable.size == 0:
        return _Node(n)
    f = int(rng.choice(splittable))
    cut = float(rng.uniform(lo[f], hi[f]))
    mask = X[:, f] < cut
    return _Node(
        n, f, cut,
        _grow(X[mask], depth + 1, limit, rng),
        _grow(X[~mask], depth + 1, limit, rng),
    )


def _path_lengths(node: _Node, X: np.ndarray, rows: np.ndarray, depth: int, out: np.ndarray):
    if node.left is None:
        out[rows] = depth + average_path_length(node.size)
        return
    go_left = X[rows, node.feature] < node.cut
    _path_lengths(node.left, X, rows[go_left], depth + 1, out)
    _path_lengths(node.right, X, rows[~go_left], depth + 1, out)


@dataclass
class IsolationForest:
    trees: list
    subsample: int
    seed: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def score(self, X) -> np.ndarray:
        """Anomaly scores in (0, 1); about 0.5 for typical points, near 1 for outliers."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        total = np.zeros(X.shape[0])
        buf = np.empty(X.shape[0])
        rows = np.arange(X.shape[0])
        for tree in self.trees:
            _path_lengths(tree, X, rows, 0, buf)
            total += buf
        mean_path = total / len(self.trees)
        return 2.0 ** (-mean_path / average_path_length(self.subsample))


def iforest_fit(X, n_trees: int = 100, subsample: int = 256, seed: int = 0) -> IsolationForest:
    """Random axis-parallel isolation trees on row subsamples.

    Row order matters: subsamples are drawn by position.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if n < 2:
        raise ValueError("isolation forest needs at least two rows")
    if np.all(X.max(axis=0) == X.min(axis=0)):
        raise ValueError("every feature is constant; nothing to isolate")
    psi = min(subsample, n)
    limit = int(np.ceil(np.log2(psi)))
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n_trees):
        idx = rng.choice(n, size=psi, replace=False)
        trees.append(_grow(X[idx], 0, limit, rng))
    return IsolationForest(trees, psi, seed)


def iforest_score(forest: IsolationForest, x) -> np.ndarray | float:
    single = np.ndim(x) == 1
    s = forest.score(x)
    return float(s[0]) if single else s


def threshold_decide(uncertainty, delta: float):
    """Accept when the model's uncertainty is strictly below ``delta``."""
    return np.asarray(uncertainty) < delta


def outlier_threshold(train_scores, outlier_quantile: float) -> float:
    """Score cut-off rejecting the top ``1 - outlier_quantile`` fraction of training points."""
    if outlier_quantile >= 1.0:
        return np.inf
    if outlier_quantile <= 0.0:
        return -np.inf
    return float(np.quantile(np.asarray(train_scores), outlier_quantile))


def combined_decide(uncertainty, delta: float, score, threshold_score: float):
    return (np.asarray(uncertainty) < delta) & (np.asarray(score) < threshold_score)


@dataclass
class ThresholdPolicy:
    """Plain-ERM model plus thresholding, optionally gated by an isolation forest."""

    model: object
    delta: float
    outlier_quantile: float | None = None
    forest: IsolationForest | None = None
    threshold_score: float = np.inf

    def accept(self, X_raw) -> np.ndarray:
        X = self.model.prepare(X_raw)
        unc = self.model.uncertainty(X)
        if self.forest is None:
            return threshold_decide(unc, self.delta)
        return combined_decide(unc, self.delta, self.forest.score(X), self.threshold_score)


def train_erm(dataset: Dataset, config: TrainConfig):
    """Same networks as the selective model, fitted by plain empirical risk minimisation."""
    hyper = replace(config.hyper, lam=0.0, gamma=0.0, delta=ERM_DELTA)
    return train_ulm(dataset, replace(config, hyper=hyper, decision_mode="coupled"))


def fit_threshold_policy(
    dataset: Dataset,
    config: TrainConfig,
    delta: float,
    outlier_quantile: float | None = None,
    n_trees: int = 100,
    subsample: int = 256,
) -> ThresholdPolicy:
    model = train_erm(dataset, config)
    if outlier_quantile is None:
        return ThresholdPolicy(model, delta)
    X = model.prepare(dataset.X)
    forest = iforest_fit(X, n_trees, subsample, seed=config.seed)
    thr = outlier_threshold(forest.score(X), outlier_quantile)
    return ThresholdPolicy(model, delta, outlier_quantile, forest, thr)
