"""Coverage certification for selective prediction-set models.

Point estimates and delta-method confidence intervals for the coverage of
accepted prediction sets, Pr(Y in H(X) | accept), for one model certified on
a held-out set and for the uniform mixture of K cross-fitted models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm


class RecalibrationError(ValueError):
    """Raised when coverage is undefined (no acceptances) or data is too thin."""


@dataclass
class Records:
    """Per-observation acceptance probabilities and set-membership indicators."""

    psi: np.ndarray
    hit: np.ndarray

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.float64).ravel()
        self.hit = np.asarray(self.hit, dtype=np.float64).ravel()
        if self.psi.shape != self.hit.shape:
            raise ValueError("psi and hit must have the same length")
        if np.any((self.psi < 0) | (self.psi > 1)):
            raise ValueError("acceptance probabilities must lie in [0, 1]")
        if not np.all((self.hit == 0) | (self.hit == 1)):
            raise ValueError("hit indicators must be 0 or 1")

    def __len__(self) -> int:
        return self.psi.size

    @property
    def w(self) -> np.ndarray:
        return self.psi * self.hit

    def select(self, mask) -> Records:
        mask = np.asarray(mask, dtype=bool)
        return Records(self.psi[mask], self.hit[mask])


@dataclass
class CoverageEstimate:
    theta: float
    sigma: float
    n_v: int
    K: int
    gamma_check: float
    q_check: float
    per_fold: list[dict] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return self.sigma == 0.0

    @property
    def std_error(self) -> float:
        return self.sigma / np.sqrt(self.n_v)

    def ci(self, level: float = 0.95, clamp: bool = True) -> tuple[float, float]:
        if not 0.0 < level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        half = norm.ppf((1.0 + level) / 2.0) * self.std_error
        lo, hi = self.theta - half, self.theta + half
        if clamp:
            lo, hi = max(lo, 0.0), min(hi, 1.0)
        return float(lo), float(hi)

    def to_dict(self, levels=(0.95,)) -> dict:
        return {
            "theta": self.theta,
            "sigma": self.sigma,
            "n_v": self.n_v,
            "K": self.K,
            "gamma_check": self.gamma_check,
            "q_check": self.q_check,
            "degenerate": self.degenerate,
            "ci": {f"{lvl:g}": list(self.ci(lvl)) for lvl in levels},
            "per_fold": self.per_fold,
        }


def _moments(rec: Records) -> tuple[float, float]:
    n = len(rec)
    if n < 2:
        raise RecalibrationError(f"need at least 2 validation observations, got {n}")
    q = float(rec.psi.mean())
    if q <= 0.0:
        raise RecalibrationError("model rejects every validation observation")
    return float(rec.w.mean()), q


def _quad_form(rec: Records, g: float, q: float) -> float:
    # a' Cov(w, psi) a with a = (1/q, -g/q^2) equals the sample variance of
    # (w - theta * psi) / q; this form is exactly zero when every accepted set covers.
    return float(np.var((rec.w - (g / q) * rec.psi) / q, ddof=1))


def _as_records(obj) -> Records:
    if isinstance(obj, Records):
        return obj
    psi, hit = obj
    return Records(psi, hit)


def recalibrate_single(records) -> CoverageEstimate:
    """Coverage estimate gamma/q with delta-method standard deviation.

    ``gamma`` is the mean of psi * hit, ``q`` the mean of psi; the variance
    is a' Cov(psi * hit, psi) a with a = (1/q, -gamma/q^2) and the sample
    covariance taken with denominator n - 1.
    """
    rec = _as_records(records)
    g, q = _moments(rec)
    var = _quad_form(rec, g, q)
    return CoverageEstimate(
        theta=g / q, sigma=float(np.sqrt(var)), n_v=len(rec), K=1,
        gamma_check=g, q_check=q,
        per_fold=[{"gamma_check": g, "q_check": q, "n_v": len(rec)}],
    )


def recalibrate_aggregate(per_fold_records) -> CoverageEstimate:
    """Coverage of the uniform mixture of K cross-fitted models.

    The per-fold moments are averaged; the covariance of the stacked
    (psi*hit, psi) pairs is block diagonal because validation folds are
    disjoint. The gradient of sum(gamma_k)/sum(q_k) w.r.t. each fold's pair
    is (1/K) * (1/q, -gamma/q^2). Unequal fold sizes use the smallest fold in
    the sqrt(n_v) scaling.
    """
    folds = [_as_records(r) for r in per_fold_records]
    K = len(folds)
    if K < 2:
        raise RecalibrationError("aggregate recalibration needs K >= 2 folds")
    moments = []
    for k, rec in enumerate(folds):
        try:
            moments.append(_moments(rec))
        except RecalibrationError as err:
            raise RecalibrationError(f"fold {k}: {err}") from None
    g = float(np.mean([m[0] for m in moments]))
    q = float(np.mean([m[1] for m in moments]))
    var = sum(_quad_form(rec, g, q) for rec in folds) / K**2
    per_fold = [
        {"gamma_check": gk, "q_check": qk, "n_v": len(rec)}
        for (gk, qk), rec in zip(moments, folds)
    ]
    return CoverageEstimate(
        theta=g / q, sigma=float(np.sqrt(var)), n_v=min(len(r) for r in folds), K=K,
        gamma_check=g, q_check=q, per_fold=per_fold,
    )


def build_records(models, X, y, plan=None, alpha: float | None = None):
    """Acceptance probabilities and hits of each model on its validation rows.

    With a single model, ``X, y`` is the validation set and one
    :class:`Records` is returned. With K models, ``plan`` (a fold plan) says
    which rows certify which model and a list of K records is returned.
    Inputs are raw features; each model applies its own preprocessing.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y)
    if plan is None:
        if isinstance(models, (list, tuple)):
            if len(models) != 1:
                raise ValueError("several models need a fold plan")
            models = models[0]
        Xm = models.prepare(X)
        return Records(models.accept_prob(Xm), models.hits(Xm, y, alpha))
    if len(models) != plan.K:
        raise ValueError(f"{len(models)} models but the fold plan has {plan.K} folds")
    if plan.assignment.size != X.shape[0]:
        raise ValueError("fold plan does not match the data")
    out = []
    for k, model in enumerate(models):
        idx = plan.validation(k)
        Xm = model.prepare(X[idx])
        out.append(Records(model.accept_prob(Xm), model.hits(Xm, y[idx], alpha)))
    return out


def local_coverage(records, in_region) -> CoverageEstimate:
    """Coverage restricted to observations flagged as inside a region.

    ``records``/``in_region`` are either one record set with one flag array,
    or per-fold lists of both.
    """
    if isinstance(records, (list, tuple)) and records and not isinstance(records[0], np.ndarray):
        subs = [_as_records(r).select(f) for r, f in zip(records, in_region)]
        if sum(len(s) for s in subs) == 0:
            raise RecalibrationError("region contains no observations")
        return recalibrate_aggregate(subs)
    sub = _as_records(records).select(in_region)
    if len(sub) == 0:
        raise RecalibrationError("region contains no observations")
    return recalibrate_single(sub)


def aggregate_membership(models, x, y, alpha: float | None = None) -> tuple[float, float]:
    """Acceptance probability of the mixture and the probability its random set contains ``y``.

    Returned as (mean psi_k(x), sum psi_k(x) 1{y in h_k(x)} / sum psi_k(x)).
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    psi = np.array([m.accept_prob(m.prepare(x))[0] for m in models])
    hit = np.array([m.hits(m.prepare(x), np.array([y]), alpha)[0] for m in models])
    total = psi.sum()
    if total <= 0:
        raise RecalibrationError("every model rejects x; membership undefined")
    return float(psi.mean()), float((psi * hit).sum() / total)


def mixture_membership(psi: np.ndarray, hit: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`aggregate_membership` from (K, n) arrays of psi and hits."""
    psi = np.asarray(psi, dtype=np.float64)
    hit = np.asarray(hit, dtype=np.float64)
    total = psi.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        member = np.where(total > 0, (psi * hit).sum(axis=0) / total, np.nan)
    return psi.mean(axis=0), member
