import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ulmguards.approximator import MlpParams
from ulmguards.losses import (
    Box, IntervalParams, UlmHyper, abs_discrepancy, acceptance_penalty_mc, categorical_nll,
    entropy, gaussian_nll, step_loss, ulm_objective, ulm_objective_and_grad,
)
from ulmguards.model import build_model


@pytest.mark.parametrize("y, expected", [(1.5, 0.2), (3.0, 1.2), (-0.5, 0.7)])
def test_abs_discrepancy_examples(y, expected):
    assert abs_discrepancy(0.2, IntervalParams(1.0, 1.0), y) == pytest.approx(expected)


def test_abs_discrepancy_degenerate_interval():
    assert abs_discrepancy(0.3, IntervalParams(2.0, 0.0), 2.0) == 0.0


def test_step_loss_examples():
    assert step_loss(2, True, 0.5) == 2.0
    assert step_loss(2, False, 0.5) == 4.0
    assert step_loss(0, False, 0.5) == 2.0


def test_gaussian_nll_examples():
    assert gaussian_nll(0.0, 1.0, 0.0) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)
    assert gaussian_nll(0.0, 1.0, 1.0) == pytest.approx(1.418939, abs=1e-6)


def test_categorical_nll_examples():
    assert categorical_nll([1.0, 0.0, 0.0], 0) == 0.0
    assert categorical_nll([0.5, 0.5], 1) == pytest.approx(math.log(2))
    assert categorical_nll([0.7, 0.2, 0.1], 1) == pytest.approx(-math.log(0.2))


def test_categorical_nll_zero_probability_is_capped():
    v = categorical_nll([1.0, 0.0], 1)
    assert np.isfinite(v) and v > 10


def test_entropy_examples():
    assert entropy(("gaussian", 1.0)) == pytest.approx(0.5 * math.log(2 * math.e * math.pi))
    assert entropy(("categorical", [0.95] + [0.05 / 8] * 8)) == pytest.approx(0.3025, abs=5e-4)
    assert entropy(("categorical", [0.8, 0.2])) == pytest.approx(0.5004, abs=5e-4)
    for k in (2, 3, 7):
        assert entropy(("categorical", np.full(k, 1.0 / k))) == pytest.approx(math.log(k))


def test_entropy_zero_probabilities():
    assert entropy(("categorical", [1.0, 0.0, 0.0])) == 0.0


def test_penalty_constant_integrands():
    unit = Box(np.zeros(2), np.ones(2))
    assert acceptance_penalty_mc(lambda Z: np.ones(len(Z)), unit, 7, 0) == 1.0
    assert acceptance_penalty_mc(lambda Z: np.zeros(len(Z)), unit, 7, 0) == 0.0


def test_penalty_half_space():
    box = Box(-np.ones(2), np.ones(2))
    v = acceptance_penalty_mc(lambda Z: (Z[:, 0] > 0).astype(float), box, 100_000, 3)
    assert v == pytest.approx(2.0, abs=0.02)


def _constant_psi_model(kind, psi_one, hyper, seed=0):
    """Separate-mode model whose decision net outputs a saturated constant."""
    model = build_model(kind, 2, hyper, hidden=(5,), decision_mode="separate",
                        decision_hidden=(), n_classes=3 if kind == "categorical" else None,
                        seed=seed)
    spec = model.decision_params.spec
    flat = np.zeros(spec.n_params)
    flat[-1] = 60.0 if psi_one else -60.0
    model.decision_params = MlpParams.unflatten(spec, flat)
    return model


def _batch(kind, rng, n=20):
    X = rng.normal(size=(n, 2))
    y = rng.integers(0, 3, size=n) if kind == "categorical" else rng.normal(size=n)
    return X, y


@pytest.mark.parametrize("kind", ["interval", "gaussian", "categorical"])
def test_objective_reductions(kind, rng):
    hyper = UlmHyper(delta=0.7, lam=0.3, gamma=0.4)
    box = Box(-np.ones(2), 2 * np.ones(2))
    X, y = _batch(kind, rng)
    m1 = _constant_psi_model(kind, True, hyper)
    loss = m1.terms(X, y).loss
    assert ulm_objective(X, y, m1, hyper, box, 50, 0) == pytest.approx(
        1.4 * loss.mean() + 0.3 * 9.0, rel=1e-12)
    m0 = _constant_psi_model(kind, False, hyper)
    loss0 = m0.terms(X, y).loss
    assert ulm_objective(X, y, m0, hyper, box, 50, 0) == pytest.approx(
        0.7 + 0.4 * loss0.mean(), rel=1e-12)
    plain = UlmHyper(delta=0.7, lam=0.0, gamma=0.0)
    assert ulm_objective(X, y, m1, plain, box, 50, 0) == pytest.approx(loss.mean(), rel=1e-12)


def test_objective_nondecreasing_in_lambda(rng):
    model = build_model("gaussian", 2, UlmHyper(), seed=1)
    X, y = _batch("gaussian", rng)
    Z = rng.uniform(-2, 2, size=(64, 2))
    vals = [ulm_objective_and_grad(X, y, model, UlmHyper(lam=lam), Z, 16.0, False)[0]
            for lam in (0.0, 0.01, 0.1, 1.0)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(-5, 5), st.floats(0, 5), st.floats(-10, 10))
def test_abs_discrepancy_nonnegative(alpha, c, r, y):
    assert abs_discrepancy(alpha, IntervalParams(c, r), y) >= 0


def test_hyper_validation():
    with pytest.raises(ValueError):
        UlmHyper(alpha=1.0)
    with pytest.raises(ValueError):
        UlmHyper(lam=-1)
