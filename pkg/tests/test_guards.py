import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ulmguards.guards import (
    Records, RecalibrationError, aggregate_membership, build_records, local_coverage,
    mixture_membership, recalibrate_aggregate, recalibrate_single,
)
from ulmguards.losses import UlmHyper
from ulmguards.model import SelectiveModel
from ulmguards.trainer import TrainConfig, kfold_train
from ulmguards.datasets import gen_density_sim
import oracles


def test_perfect_coverage_is_degenerate():
    est = recalibrate_single(([1, 1, 1, 1], [1, 1, 1, 1]))
    assert est.theta == 1.0 and est.sigma == 0.0 and est.degenerate
    assert est.ci() == (1.0, 1.0)


def test_single_hand_example():
    est = recalibrate_single(([1, 1, 1, 0], [1, 1, 0, 0]))
    assert est.gamma_check == 0.5 and est.q_check == 0.75
    assert est.theta == pytest.approx(2 / 3)
    theta, sigma, *_ = oracles.single_coverage([1, 1, 1, 0], [1, 1, 0, 0])
    assert est.sigma == pytest.approx(sigma, abs=1e-12)


def test_single_errors():
    with pytest.raises(RecalibrationError):
        recalibrate_single(([0, 0, 0], [1, 0, 1]))
    with pytest.raises(RecalibrationError):
        recalibrate_single(([1.0], [1]))


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 20), st.integers(0, 2**31))
def test_single_matches_oracle(n, seed):
    rng = np.random.default_rng(seed)
    psi = rng.uniform(0, 1, n)
    hit = rng.integers(0, 2, n).astype(float)
    est = recalibrate_single((psi, hit))
    theta, sigma, g, q = oracles.single_coverage(psi.tolist(), hit.tolist())
    assert abs(est.theta - theta) < 1e-12 and abs(est.sigma - sigma) < 1e-12


def test_aggregate_identical_folds():
    psi, hit = [1, 1, 1, 0], [1, 1, 0, 0]
    single = recalibrate_single((psi, hit))
    agg = recalibrate_aggregate([(psi, hit), (psi, hit)])
    assert agg.theta == pytest.approx(2 / 3)
    assert agg.sigma == pytest.approx(single.sigma / math.sqrt(2), rel=1e-12)


def test_aggregate_unequal_moments():
    # gamma = (0.5, 0.7), q = (0.8, 0.9) on ten rows each
    f1 = ([1.0] * 8 + [0.0] * 2, [1] * 5 + [0] * 5)
    f2 = ([1.0] * 9 + [0.0], [1] * 7 + [0] * 3)
    est = recalibrate_aggregate([f1, f2])
    assert est.theta == pytest.approx(0.6 / 0.85, abs=1e-12)
    assert est.theta == pytest.approx(0.70588, abs=1e-5)


def test_aggregate_perfect_and_errors():
    ones = ([1, 1, 1], [1, 1, 1])
    est = recalibrate_aggregate([ones, ones, ones])
    assert est.theta == 1.0 and est.sigma == 0.0
    with pytest.raises(RecalibrationError):
        recalibrate_aggregate([ones])
    with pytest.raises(RecalibrationError, match="fold 1"):
        recalibrate_aggregate([ones, ([0, 0], [1, 1])])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 3), st.integers(0, 2**31))
def test_aggregate_matches_oracle(K, seed):
    rng = np.random.default_rng(seed)
    folds = []
    for _ in range(K):
        n = int(rng.integers(2, 21))
        folds.append((rng.uniform(0.01, 1, n), rng.integers(0, 2, n).astype(float)))
    est = recalibrate_aggregate(folds)
    theta, sigma, *_ = oracles.aggregate_coverage([(p.tolist(), h.tolist()) for p, h in folds])
    assert abs(est.theta - theta) < 1e-12 and abs(est.sigma - sigma) < 1e-12
    assert est.n_v == min(len(p) for p, _ in folds)


def test_ci_width_and_clamp():
    est = recalibrate_single(([1, 1, 1, 0, 1, 1], [1, 1, 0, 0, 1, 1]))
    lo, hi = est.ci(0.9, clamp=False)
    z = oracles.normal_quantile(0.95)
    assert hi - lo == pytest.approx(2 * z * est.sigma / math.sqrt(6), rel=1e-9)
    lo, hi = est.ci(0.99)
    assert 0.0 <= lo and hi <= 1.0


def test_local_coverage_reductions(rng):
    psi = rng.uniform(0.1, 1, 40)
    hit = rng.integers(0, 2, 40)
    everything = local_coverage((psi, hit), np.ones(40, bool))
    glob = recalibrate_single((psi, hit))
    assert everything.theta == glob.theta and everything.sigma == glob.sigma
    A = rng.uniform(size=40) < 0.5
    a1, a2 = local_coverage((psi, hit), A), local_coverage((psi, hit), ~A)
    weighted = (a1.gamma_check * A.sum() + a2.gamma_check * (~A).sum()) / 40
    assert weighted == pytest.approx(glob.gamma_check, abs=1e-14)


def test_local_coverage_half_space_oracle(rng):
    x = rng.normal(size=(60, 2))
    psi, hit = rng.uniform(0.1, 1, 60), rng.integers(0, 2, 60)
    flag = x[:, 0] > 0
    est = local_coverage(Records(psi, hit), flag)
    sub = [i for i in range(60) if x[i, 0] > 0]
    theta, sigma, *_ = oracles.single_coverage([psi[i] for i in sub], [float(hit[i]) for i in sub])
    assert abs(est.theta - theta) < 1e-12 and abs(est.sigma - sigma) < 1e-12


def test_local_coverage_per_fold(rng):
    recs = [Records(rng.uniform(0.1, 1, 30), rng.integers(0, 2, 30)) for _ in range(3)]
    flags = [rng.uniform(size=30) < 0.6 for _ in range(3)]
    est = local_coverage(recs, flags)
    ref = recalibrate_aggregate([r.select(f) for r, f in zip(recs, flags)])
    assert est.theta == ref.theta and est.K == 3
    with pytest.raises(RecalibrationError):
        local_coverage(recs[0], np.zeros(30, bool))


def test_mixture_membership_examples():
    acc, mem = mixture_membership(np.array([[1.0], [1.0]]), np.array([[1.0], [0.0]]))
    assert mem[0] == 0.5 and acc[0] == 1.0
    acc, mem = mixture_membership(np.array([[1.0], [0.0]]), np.array([[1.0], [0.0]]))
    assert mem[0] == 1.0 and acc[0] == 0.5
    acc, mem = mixture_membership(np.array([[0.3], [0.3]]), np.array([[1.0], [1.0]]))
    assert mem[0] == 1.0


@pytest.fixture(scope="module")
def fitted():
    ds = gen_density_sim(150, 11)
    cfg = TrainConfig(hyper=UlmHyper(delta=2.5, lam=0.01), hidden=(6,), epochs=3, K=3, seed=1)
    models, plan = kfold_train(ds, cfg)
    return ds, models, plan


def test_build_records_and_determinism(fitted):
    ds, models, plan = fitted
    recs = build_records(models, ds.X, ds.y, plan)
    again = build_records([SelectiveModel.from_json(m.to_json()) for m in models], ds.X, ds.y, plan)
    for a, b in zip(recs, again):
        assert np.array_equal(a.psi, b.psi) and np.array_equal(a.hit, b.hit)
    assert sum(len(r) for r in recs) == ds.n
    with pytest.raises(ValueError):
        build_records(models[:2], ds.X, ds.y, plan)


def test_build_records_full_range_hits(fitted):
    ds, models, _ = fitted
    rec = build_records(models[0], ds.X, ds.y, alpha=1e-15)
    assert np.all(rec.hit == 1.0)


def test_aggregate_membership_matches_vectorised(fitted):
    ds, models, _ = fitted
    x, y = ds.X[0], ds.y[0]
    acc, mem = aggregate_membership(models, x, y)
    psi = np.array([[m.accept_prob(x)] for m in models])
    hit = np.array([m.hits(x[None], [y]) for m in models])
    acc2, mem2 = mixture_membership(psi, hit)
    assert acc == pytest.approx(acc2[0]) and mem == pytest.approx(mem2[0])
