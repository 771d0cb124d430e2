import math

import numpy as np
import pytest
from scipy import integrate

from ulmguards.datasets import (
    CsvError, dataset_to_csv, density_truth, entropy_truth, gen_density_sim, gen_entropy_sim,
    gen_misspec_sim, load_csv, misspec_mean, pca_whiten_fit,
)


def test_entropy_sim_sigma():
    t = entropy_truth()
    assert t.sigma(np.array([[-1.0, 0.7]]))[0] == pytest.approx(0.3)
    assert t.sigma(np.array([[2.0, -2.5]]))[0] == pytest.approx(2.3)


def test_entropy_sim_slab_variance():
    ds = gen_entropy_sim(100_000, 0)
    slab = np.abs(ds.X[:, 0] - 2.0) < 0.05
    assert np.var(ds.y[slab]) == pytest.approx(5.29, rel=0.15)


def test_entropy_sim_slab_mean_within_three_se():
    ds = gen_entropy_sim(100_000, 1)
    slab = np.abs(ds.X[:, 0] + 1.0) < 0.05
    ys = ds.y[slab]
    assert abs(ys.mean()) < 3 * ys.std() / math.sqrt(ys.size)


def test_density_sim_entropy_formula():
    # the generator's sd is configurable; the entropy follows 0.5 log(2 e pi sigma^2)
    X = np.zeros((3, 2))
    assert density_truth(3.5).entropy(X) == pytest.approx([2.672] * 3, abs=5e-4)
    assert density_truth().entropy(X) == pytest.approx([0.5 * math.log(2 * math.e * math.pi * 4.0)] * 3)


def test_density_sim_density():
    t = density_truth()
    assert t.density(np.zeros((1, 2)))[0] == pytest.approx(1 / (2 * math.pi), abs=1e-12)
    assert t.density(np.zeros((1, 2)))[0] == pytest.approx(0.1592, abs=1e-4)
    total, _ = integrate.dblquad(lambda a, b: t.density(np.array([[a, b]]))[0], -8, 8, -8, 8)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_misspec_mean_examples():
    assert misspec_mean(np.array([[0.0, 0.0]]))[0] == pytest.approx(4.0)
    assert misspec_mean(np.array([[1.0, 1.0]]))[0] == pytest.approx(2.0)
    assert misspec_mean(np.array([[2.0, 2.0]]))[0] == pytest.approx(4.0)
    edge = np.array([[1.0, 0.3], [1.0 - 1e-9, 0.3]])
    assert abs(np.diff(misspec_mean(edge))[0]) < 1e-7


@pytest.mark.parametrize("gen", [gen_entropy_sim, gen_density_sim, gen_misspec_sim])
def test_generators_deterministic(gen):
    a, b = gen(50, 7), gen(50, 7)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.y, gen(50, 8).y)


def test_whitening_of_white_data(rng):
    X = rng.standard_normal((20_000, 3))
    t = pca_whiten_fit(X)
    assert t.n_components == 3
    C = np.cov(t.apply(X).T)
    assert np.allclose(C, np.eye(3), atol=0.05)
    # near-orthogonal axes, scales near 1
    assert np.allclose(t.axes.T @ t.axes, np.eye(3), atol=1e-10)
    assert np.allclose(t.scales, 1.0, atol=0.05)


def test_whitening_line_keeps_one_component(rng):
    s = rng.normal(size=200)
    X = np.column_stack([s, 2 * s + 1])
    assert pca_whiten_fit(X).n_components == 1


def test_whitening_training_invariants(rng):
    X = rng.normal(size=(500, 4)) @ rng.normal(size=(4, 4)) + 3.0
    Z = pca_whiten_fit(X, 0.999999).apply(X)
    assert np.max(np.abs(Z.mean(axis=0))) < 1e-9
    assert np.allclose(Z.var(axis=0, ddof=1), 1.0, atol=1e-6)


def test_whitening_rank_zero():
    with pytest.raises(ValueError):
        pca_whiten_fit(np.ones((5, 2)))


def _write(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    return p


def test_csv_well_formed(tmp_path):
    ds = load_csv(_write(tmp_path, "a,b,y\n1,2,3\n4,5,6\n7,8,9\n"), ["a", "b"], "y")
    assert ds.n == 3 and ds.X.shape == (3, 2)


def test_csv_blank_feature(tmp_path):
    with pytest.raises(CsvError, match=r"row 3.*'b'"):
        load_csv(_write(tmp_path, "a,b,y\n1,2,3\n4,,6\n"), ["a", "b"], "y")


def test_csv_categorical_labels(tmp_path):
    with pytest.raises(CsvError, match="row 2"):
        load_csv(_write(tmp_path, "a,y\n1,0.5\n"), ["a"], "y", "categorical")


def test_csv_missing_column_and_empty(tmp_path):
    with pytest.raises(CsvError, match="missing"):
        load_csv(_write(tmp_path, "a,y\n1,2\n"), ["c"], "y")
    with pytest.raises(CsvError, match="empty"):
        load_csv(_write(tmp_path, ""), ["a"], "y")


def test_csv_round_trip(tmp_path):
    ds = gen_misspec_sim(20, 3)
    back = load_csv(_write(tmp_path, dataset_to_csv(ds)), None, "y")
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
