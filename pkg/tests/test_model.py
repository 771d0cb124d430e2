import math

import numpy as np
import pytest
from scipy.special import expit

from ulmguards.approximator import MlpParams
from ulmguards.losses import SIGMA_FLOOR, UlmHyper, inv_softplus
from ulmguards.model import Interval, LabelSet, SelectiveModel, build_model, contains, greedy_label_set


def _constant_head(kind, bias, hyper, n_classes=None, **kw):
    """Linear-head model ignoring x: zero weights, chosen bias."""
    model = build_model(kind, 2, hyper, hidden=(), n_classes=n_classes, **kw)
    spec = model.pred_params.spec
    model.pred_params = MlpParams(spec, [np.zeros((2, spec.output_dim))], [np.asarray(bias, float)])
    return model


X = np.array([[0.3, -1.2], [2.0, 5.0]])


def test_gaussian_uncertainty_unit_sigma():
    m = _constant_head("gaussian", [0.0, inv_softplus(1.0 - SIGMA_FLOOR)], UlmHyper())
    assert m.uncertainty(X) == pytest.approx([1.418939] * 2, abs=1e-6)


def test_categorical_uncertainty_uniform():
    m = _constant_head("categorical", [0.0, 0.0], UlmHyper(), n_classes=2)
    assert m.uncertainty(X) == pytest.approx([math.log(2)] * 2)


def test_interval_uncertainty():
    m = _constant_head("interval", [0.0, inv_softplus(1.0)], UlmHyper(alpha=0.2))
    assert m.uncertainty(X) == pytest.approx([0.2, 0.2])


def test_accept_prob_coupled():
    hyper = UlmHyper(alpha=0.2, delta=0.2)
    m = _constant_head("interval", [0.0, inv_softplus(1.0)], hyper)
    assert m.accept_prob(X) == pytest.approx([0.5, 0.5], abs=1e-12)
    m = _constant_head("interval", [0.0, inv_softplus(6.0)], UlmHyper(alpha=0.2, delta=0.2))
    m.beta_raw = inv_softplus(1.0)
    assert m.accept_prob(X[0]) == pytest.approx(expit(-1.0), abs=1e-12)
    assert m.accept_prob(X[0]) == pytest.approx(0.2689, abs=1e-4)


def test_accept_prob_saturates_for_low_uncertainty():
    m = _constant_head("interval", [0.0, inv_softplus(0.1)], UlmHyper(alpha=0.2, delta=1.0))
    m.beta_raw = inv_softplus(200.0)
    assert np.all(m.accept_prob(X) > 0.999)


def test_gaussian_prediction_set():
    m = _constant_head("gaussian", [0.0, inv_softplus(1.0 - SIGMA_FLOOR)], UlmHyper())
    s = m.prediction_set(X[0], 0.1)
    assert s.lower == pytest.approx(-1.6449, abs=1e-4)
    assert s.upper == pytest.approx(1.6449, abs=1e-4)


def test_interval_prediction_set():
    m = _constant_head("interval", [2.0, inv_softplus(0.5)], UlmHyper())
    s = m.prediction_set(X[1])
    assert (s.lower, s.upper) == pytest.approx((1.5, 2.5))


def test_greedy_label_sets():
    assert greedy_label_set([0.7, 0.2, 0.1], 0.1).labels == (0, 1)
    for a in (0.01, 0.5, 0.9):
        assert greedy_label_set([1.0, 0.0, 0.0], a).labels == (0,)
    assert greedy_label_set([0.4, 0.4, 0.2], 0.5).labels == (0, 1)


def test_categorical_prediction_set_from_model():
    logits = np.log([0.7, 0.2, 0.1])
    m = _constant_head("categorical", logits, UlmHyper(), n_classes=3)
    assert m.prediction_set(X[0], 0.1).labels == (0, 1)


def test_contains_conventions():
    assert contains(Interval(0.0, 2.0), 2.0)
    assert not contains(Interval(0.0, 2.0), 2.0000001)
    assert not contains(LabelSet((0, 1)), 2)
    with pytest.raises(ValueError):
        Interval(1.0, 0.0)
    with pytest.raises(ValueError):
        LabelSet((1, 1))


def test_hits_use_closed_boundary():
    m = _constant_head("interval", [0.0, inv_softplus(1.0)], UlmHyper())
    lo, hi = m.interval_bounds(X)
    assert np.array_equal(m.hits(X, hi), [1.0, 1.0])
    assert np.array_equal(m.hits(X, hi + 1e-6), [0.0, 0.0])


@pytest.mark.parametrize("kind, mode", [
    ("gaussian", "coupled"), ("interval", "separate"), ("categorical", "coupled"),
])
def test_json_round_trip(kind, mode, rng):
    m = build_model(kind, 3, UlmHyper(lam=0.1), decision_mode=mode,
                    n_classes=4 if kind == "categorical" else None, seed=5)
    again = SelectiveModel.from_json(m.to_json())
    Xr = rng.normal(size=(6, 3))
    assert np.array_equal(m.accept_prob(Xr), again.accept_prob(Xr))
    assert again.to_json() == m.to_json()


def test_flat_parameters_round_trip():
    m = build_model("gaussian", 2, UlmHyper(), decision_mode="separate", seed=2)
    flat = m.get_flat()
    m.set_flat(flat * 2)
    assert np.array_equal(m.get_flat(), flat * 2)
