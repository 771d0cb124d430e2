"""Set losses, likelihoods, entropies and the uncertainty-aware objective.

Scalar helpers (``abs_discrepancy``, ``step_loss``, ...) mirror the textbook
definitions and are what the tests check by hand. The ``*_terms`` functions
are their vectorised counterparts, returning the loss together with its
derivative with respect to the raw network head so the trainer can
backpropagate without an autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax

LOG_2PI = float(np.log(2.0 * np.pi))
NLL_CAP = 50.0
SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class IntervalParams:
    center: float
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("interval radius must be non-negative")

    @property
    def lower(self) -> float:
        return self.center - self.radius

    @property
    def upper(self) -> float:
        return self.center + self.radius


@dataclass(frozen=True)
class UlmHyper:
    """Hyperparameters of the uncertainty-aware loss.

    alpha is the target miscoverage, delta the cost of abstaining, lam the
    weight of the uniform acceptance penalty and gamma the weight of the
    untruncated loss added to the objective. t_alpha only feeds the step loss.
    """

    alpha: float = 0.1
    delta: float = 1.0
    lam: float = 0.0
    gamma: float = 0.5
    t_alpha: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.delta < 0:
            raise ValueError(f"delta must be non-negative, got {self.delta}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.t_alpha <= 0:
            raise ValueError(f"t_alpha must be positive, got {self.t_alpha}")


# ---------------------------------------------------------------- scalar losses

def abs_discrepancy(alpha: float, interval: IntervalParams, y):
    """alpha * radius plus the distance from ``y`` to the interval (elementwise for arrays)."""
    y = np.asarray(y, dtype=np.float64)
    out = (
        alpha * interval.radius
        + np.maximum(interval.lower - y, 0.0)
        + np.maximum(y - interval.upper, 0.0)
    )
    return float(out) if out.ndim == 0 else out


def step_loss(set_size: float, contains_y: bool, t_alpha: float) -> float:
    if t_alpha <= 0:
        raise ValueError("t_alpha must be positive")
    return float(set_size) + (0.0 if contains_y else 1.0 / t_alpha)


def gaussian_nll(mu: float, sigma: float, y: float) -> float:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return 0.5 * LOG_2PI + np.log(sigma) + (y - mu) ** 2 / (2.0 * sigma**2)


def categorical_nll(probs, label: int) -> float:
    """Negative log probability of ``label``, capped at ``NLL_CAP``."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probs must be a probability vector")
    p = probs[int(label)]
    if p <= np.exp(-NLL_CAP):
        return NLL_CAP
    return float(-np.log(p))


def categorical_nll_from_logits(logits, label: int) -> float:
    val = -log_softmax(np.asarray(logits, dtype=np.float64))[int(label)]
    return float(min(val, NLL_CAP))


def gaussian_entropy(sigma: float) -> float:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return 0.5 * (LOG_2PI + 1.0) + float(np.log(sigma))


def categorical_entropy(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy(dist) -> float:
    """Entropy of ``("gaussian", sigma)`` or ``("categorical", probs)``.

    Plain probability vectors are accepted as categorical.
    """
    if isinstance(dist, tuple) and len(dist) == 2 and isinstance(dist[0], str):
        kind, value = dist
        if kind == "gaussian":
            return gaussian_entropy(value)
        if kind == "categorical":
            return categorical_entropy(value)
        raise ValueError(f"unknown distribution kind {kind!r}")
    return categorical_entropy(dist)


# ------------------------------------------------------ vectorised head terms
# Each returns (value, d value / d raw head outputs), rows are observations.

def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


def interval_terms(out: np.ndarray, y: np.ndarray, alpha: float):
    """Absolute-discrepancy loss for heads ``(center, raw_radius)``."""
    mu, raw = out[:, 0], out[:, 1]
    r = softplus(raw)
    below = (mu - r) - y
    above = y - (mu + r)
    loss = alpha * r + np.maximum(below, 0.0) + np.maximum(above, 0.0)
    ib = (below > 0).astype(float)
    ia = (above > 0).astype(float)
    grad = np.empty_like(out)
    grad[:, 0] = ib - ia
    grad[:, 1] = (alpha - ib - ia) * expit(raw)
    return loss, grad


def interval_uncertainty(out: np.ndarray, alpha: float):
    raw = out[:, 1]
    grad = np.zeros_like(out)
    grad[:, 1] = alpha * expit(raw)
    return alpha * softplus(raw), grad


def gaussian_sigma(raw: np.ndarray) -> np.ndarray:
    return softplus(raw) + SIGMA_FLOOR


def gaussian_terms(out: np.ndarray, y: np.ndarray):
    """Gaussian negative log likelihood for heads ``(mean, raw_sigma)``."""
    mu, raw = out[:, 0], out[:, 1]
    sigma = gaussian_sigma(raw)
    resid = y - mu
    loss = 0.5 * LOG_2PI + np.log(sigma) + resid**2 / (2.0 * sigma**2)
    grad = np.empty_like(out)
    grad[:, 0] = -resid / sigma**2
    grad[:, 1] = (1.0 / sigma - resid**2 / sigma**3) * expit(raw)
    return loss, grad


def gaussian_uncertainty(out: np.ndarray):
    raw = out[:, 1]
    sigma = gaussian_sigma(raw)
    grad = np.zeros_like(out)
    grad[:, 1] = expit(raw) / sigma
    return 0.5 * (LOG_2PI + 1.0) + np.log(sigma), grad


def categorical_terms(out: np.ndarray, y: np.ndarray):
    """Capped cross-entropy for class logits."""
    logp = log_softmax(out, axis=1)
    idx = np.asarray(y, dtype=int)
    rows = np.arange(out.shape[0])
    loss = -logp[rows, idx]
    grad = np.exp(logp)
    grad[rows, idx] -= 1.0
    capped = loss > NLL_CAP
    loss = np.where(capped, NLL_CAP, loss)
    grad[capped] = 0.0
    return loss, grad


def categorical_uncertainty(out: np.ndarray):
    logp = log_softmax(out, axis=1)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    grad = -p * (logp + ent[:, None])
    return ent, grad


# ------------------------------------------------------------ acceptance penalty

@dataclass(frozen=True)
class Box:
    """Axis-aligned region of input space."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-D arrays of equal length")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(m, self.lower.size))

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Box:
        return cls(np.array(d["lower"], dtype=float), np.array(d["upper"], dtype=float))


def acceptance_penalty_mc(accept_prob_fn, box: Box, m: int, seed: int) -> float:
    """Unbiased Monte-Carlo estimate of the integral of ``accept_prob_fn`` over ``box``.

    ``accept_prob_fn`` maps an (m, p) array to m acceptance probabilities.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    vol = box.volume
    if not vol > 0:
        raise ValueError("penalty box has zero volume")
    pts = box.sample(m, np.random.default_rng(seed))
    return vol * float(np.mean(accept_prob_fn(pts)))


# ------------------------------------------------------------------ objective

def ulm_objective(X, y, model, hyper: UlmHyper, box: Box, m_penalty: int, seed: int) -> float:
    """Uncertainty-aware objective of ``model`` on one batch.

    Penalty points are drawn from ``box`` with ``seed``; see
    :func:`ulm_objective_and_grad` for the version with frozen points.
    """
    Z = box.sample(m_penalty, np.random.default_rng(seed))
    return ulm_objective_and_grad(X, y, model, hyper, Z, box.volume, need_grad=False)[0]


def ulm_objective_and_grad(X, y, model, hyper: UlmHyper, Z, volume: float, need_grad: bool = True):
    """Value and flat-parameter gradient of the uncertainty-aware objective.

    mean(loss * psi + delta * (1 - psi)) + lam * volume * mean(psi(Z))
    + gamma * mean(loss), where psi is the relaxed acceptance probability and
    ``Z`` holds the penalty sample points.

    Returns ``(value, grad, parts)`` with ``parts`` a dict of the separate
    terms (``data``, ``penalty``, ``augment``, ``mean_psi``).
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    terms = model.terms(X, y)
    loss, psi = terms.loss, terms.psi
    data = float(np.mean(loss * psi + hyper.delta * (1.0 - psi)))
    augment = float(np.mean(loss))
    value = data + hyper.gamma * augment
    penalty = 0.0
    zterms = None
    if hyper.lam > 0 and Z is not None and len(Z):
        zterms = model.terms(np.asarray(Z, dtype=np.float64))
        penalty = volume * float(np.mean(zterms.psi))
        value += hyper.lam * penalty
    parts = {"data": data, "penalty": penalty, "augment": augment, "mean_psi": float(np.mean(psi))}
    if not need_grad:
        return value, None, parts
    grad = model.backward(terms, (psi + hyper.gamma) / n, (loss - hyper.delta) / n)
    if zterms is not None:
        m = zterms.psi.shape[0]
        grad += model.backward(zterms, None, np.full(m, hyper.lam * volume / m))
    return value, grad, parts


def data_loss(X, y, model, hyper: UlmHyper) -> float:
    """Adaptively truncated loss only: no penalty, no augmentation."""
    terms = model.terms(np.asarray(X, dtype=np.float64), y)
    return float(np.mean(terms.loss * terms.psi + hyper.delta * (1.0 - terms.psi)))
