"""Synthetic generators with known truth, CSV ingestion and PCA whitening."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import multivariate_normal, norm

OUTCOME_KINDS = ("real", "categorical")


@dataclass
class GeneratorTruth:
    """Vectorised evaluators of the data-generating distribution."""

    mean: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    density: Callable[[np.ndarray], np.ndarray]
    sample_x: Callable[[int, np.random.Generator], np.ndarray]

    def entropy(self, X) -> np.ndarray:
        return 0.5 * np.log(2.0 * np.pi * np.e * self.sigma(X) ** 2)

    def interval_prob(self, X, lower, upper) -> np.ndarray:
        """Pr(lower <= Y <= upper | X) under the true Gaussian conditional."""
        mu, sd = self.mean(X), self.sigma(X)
        return norm.cdf((upper - mu) / sd) - norm.cdf((lower - mu) / sd)

    def sample_y(self, X, rng: np.random.Generator) -> np.ndarray:
        return self.mean(X) + self.sigma(X) * rng.standard_normal(X.shape[0])


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    outcome_kind: str = "real"
    truth: GeneratorTruth | None = None
    feature_names: list[str] = field(default_factory=list)
    preprocess: "WhitenTransform | None" = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=int if self.outcome_kind == "categorical" else np.float64)
        if self.outcome_kind not in OUTCOME_KINDS:
            raise ValueError(f"unknown outcome kind {self.outcome_kind!r}")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y have different row counts")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")
        if not self.feature_names:
            self.feature_names = [f"x{j + 1}" for j in range(self.X.shape[1])]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> Dataset:
        return Dataset(
            self.X[idx], self.y[idx], self.outcome_kind, self.truth,
            list(self.feature_names), self.preprocess,
        )


# ------------------------------------------------------------------ generators

def _uniform_square(half_width: float):
    def sample(n, rng):
        return rng.uniform(-half_width, half_width, size=(n, 2))

    def density(X):
        X = np.atleast_2d(X)
        inside = np.all(np.abs(X) <= half_width, axis=1)
        return inside / (2.0 * half_width) ** 2

    return sample, density


def _draw(truth: GeneratorTruth, n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    X = truth.sample_x(n, rng)
    y = truth.sample_y(X, rng)
    return Dataset(X, y, "real", truth)


def entropy_truth(base_sigma: float = 0.3, half_width: float = 3.0) -> GeneratorTruth:
    sample, density = _uniform_square(half_width)
    return GeneratorTruth(
        mean=lambda X: np.zeros(np.atleast_2d(X).shape[0]),
        sigma=lambda X: base_sigma + np.maximum(0.0, np.atleast_2d(X)[:, 0]),
        density=density,
        sample_x=sample,
    )


def gen_entropy_sim(n: int, seed: int, **kw) -> Dataset:
    """Uniform inputs on [-3, 3]^2, zero mean, sd 0.3 + max(0, x1)."""
    return _draw(entropy_truth(**kw), n, seed)


def density_truth(sigma: float = 2.0) -> GeneratorTruth:
    mvn = multivariate_normal(mean=np.zeros(2), cov=np.eye(2))
    return GeneratorTruth(
        mean=lambda X: np.zeros(np.atleast_2d(X).shape[0]),
        sigma=lambda X: np.full(np.atleast_2d(X).shape[0], sigma),
        density=lambda X: np.atleast_1d(mvn.pdf(np.atleast_2d(X))),
        sample_x=lambda n, rng: rng.standard_normal((n, 2)),
    )


def gen_density_sim(n: int, seed: int, **kw) -> Dataset:
    """Standard normal inputs, zero mean, constant sd (2.0 by default)."""
    return _draw(density_truth(**kw), n, seed)


def misspec_mean(X) -> np.ndarray:
    X = np.atleast_2d(X)
    x1, x2 = X[:, 0], X[:, 1]
    bump = 4.0 * (1.0 - x1**2) * (1.0 - x2**2)
    inside = (np.abs(x1) <= 1.0) & (np.abs(x2) <= 1.0)
    return x1 + x2 + np.where(inside, bump, 0.0)


def misspec_truth(sigma: float = 0.3, half_width: float = 3.0) -> GeneratorTruth:
    sample, density = _uniform_square(half_width)
    return GeneratorTruth(
        mean=misspec_mean,
        sigma=lambda X: np.full(np.atleast_2d(X).shape[0], sigma),
        density=density,
        sample_x=sample,
    )


def gen_misspec_sim(n: int, seed: int, **kw) -> Dataset:
    """Linear mean x1 + x2 with a quadratic bump on [-1, 1]^2."""
    return _draw(misspec_truth(**kw), n, seed)


GENERATORS = {
    "entropy": gen_entropy_sim,
    "density": gen_density_sim,
    "misspec": gen_misspec_sim,
}


# ------------------------------------------------------------------- whitening

@dataclass
class WhitenTransform:
    mean: np.ndarray
    axes: np.ndarray  # (p, k), columns are principal directions
    scales: np.ndarray  # (k,), component standard deviations

    @property
    def n_components(self) -> int:
        return self.axes.shape[1]

    def apply(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.mean.size:
            raise ValueError(f"expected {self.mean.size} features, got {X.shape[1]}")
        return (X - self.mean) @ self.axes / self.scales

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "axes": self.axes.tolist(),
            "scales": self.scales.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> WhitenTransform:
        return cls(
            np.array(d["mean"], dtype=float),
            np.array(d["axes"], dtype=float).reshape(len(d["mean"]), -1),
            np.array(d["scales"], dtype=float),
        )


def pca_whiten_fit(X, var_fraction: float = 0.99) -> WhitenTransform:
    """PCA keeping the fewest components explaining ``var_fraction`` of the variance."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if n < 2:
        raise ValueError("whitening needs at least two rows")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    var = s**2 / (n - 1)
    total = var.sum()
    if not total > 0 or var[0] <= 1e-12 * max(1.0, np.abs(X).max() ** 2):
        raise ValueError("data has rank 0; nothing to whiten")
    # drop numerically-null directions before counting
    var = np.where(var > var[0] * 1e-12, var, 0.0)
    cum = np.cumsum(var) / var.sum()
    k = int(np.searchsorted(cum, var_fraction - 1e-12) + 1)
    k = min(k, int(np.count_nonzero(var)))
    axes = vt[:k].T.copy()
    # sign convention: largest-magnitude loading positive
    flip = np.sign(axes[np.argmax(np.abs(axes), axis=0), np.arange(k)])
    axes *= flip
    return WhitenTransform(mean, axes, np.sqrt(var[:k]))


# ------------------------------------------------------------------------- CSV

class CsvError(ValueError):
    pass


def load_csv(
    path,
    feature_columns: list[str] | None,
    outcome_column: str,
    outcome_kind: str = "real",
) -> Dataset:
    """Read a header-first CSV. ``feature_columns=None`` takes every non-outcome column."""
    if outcome_kind not in OUTCOME_KINDS:
        raise CsvError(f"unknown outcome kind {outcome_kind!r}")
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise CsvError(f"{path}: empty file") from None
    if feature_columns is None:
        feature_columns = [h for h in header if h != outcome_column]
    missing = [c for c in [*feature_columns, outcome_column] if c not in header]
    if missing:
        raise CsvError(f"{path}: missing columns {missing}")
    fidx = [header.index(c) for c in feature_columns]
    yidx = header.index(outcome_column)
    X, y = [], []
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise CsvError(f"{path}: row {rowno} has {len(row)} fields, expected {len(header)}")
        feats = []
        for c, j in zip(feature_columns, fidx):
            cell = row[j].strip()
            try:
                feats.append(float(cell))
            except ValueError:
                raise CsvError(f"{path}: row {rowno}, column {c!r}: not a number: {cell!r}") from None
            if not np.isfinite(feats[-1]):
                raise CsvError(f"{path}: row {rowno}, column {c!r}: non-finite value")
        cell = row[yidx].strip()
        try:
            val = float(cell)
        except ValueError:
            raise CsvError(f"{path}: row {rowno}, column {outcome_column!r}: not a number: {cell!r}") from None
        if outcome_kind == "categorical" and (not val.is_integer() or val < 0):
            raise CsvError(
                f"{path}: row {rowno}, column {outcome_column!r}: class labels must be non-negative integers"
            )
        X.append(feats)
        y.append(val)
    if not X:
        raise CsvError(f"{path}: no data rows")
    return Dataset(np.array(X), np.array(y), outcome_kind, feature_names=list(feature_columns))


def dataset_to_csv(ds: Dataset, outcome_column: str = "y") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*ds.feature_names, outcome_column])
    for xi, yi in zip(ds.X, ds.y):
        w.writerow([repr(float(v)) for v in xi] + [str(int(yi)) if ds.outcome_kind == "categorical" else repr(float(yi))])
    return buf.getvalue()
