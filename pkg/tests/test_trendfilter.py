"""ADMM trend filtering on binned counts, plus the TFPP variant."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import binned_mle_theta, tf_objective, tf_oracle_objective, tv_prox_dual
from tvdensity.dgp import get_dgp, sample
from tvdensity.errors import DataError, SupportError
from tvdensity.trendfilter import (
    AdmmConfig,
    TfProblem,
    admm_fit,
    binned_nll,
    difference_matrix,
    fused_lasso_prox,
    make_tf_problem,
    tfpp_penalty_matrix,
    tfpp_variant,
)


@pytest.fixture(scope="module")
def tn_data():
    return sample(get_dgp("truncated_normal"), 60, seed=17)


def test_difference_matrix_values():
    d1 = difference_matrix(1, 4)
    expected = np.array([[-1, 1, 0, 0], [0, -1, 1, 0], [0, 0, -1, 1]], dtype=float)
    np.testing.assert_array_equal(d1, expected)
    d2 = difference_matrix(2, 6)
    assert d2.shape == (4, 6)
    t = np.arange(6, dtype=float)
    np.testing.assert_allclose(d2 @ (3.0 - 2.0 * t), 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        difference_matrix(0, 4)
    with pytest.raises(ValueError):
        difference_matrix(4, 4)


def test_fused_prox_basics():
    v = np.array([0.3, -1.2, 0.8])
    np.testing.assert_array_equal(fused_lasso_prox(v, 0.0), v)
    np.testing.assert_array_equal(fused_lasso_prox(np.array([2.5]), 3.0), [2.5])
    np.testing.assert_allclose(fused_lasso_prox(np.array([0.0, 1.0, 0.0]), 0.2),
                               [0.2, 0.6, 0.2], atol=1e-12)
    big = fused_lasso_prox(v, 100.0)
    np.testing.assert_allclose(big, np.full(3, v.mean()), atol=1e-12)
    with pytest.raises(ValueError):
        fused_lasso_prox(v, -0.1)


def test_fused_prox_matches_dual_oracle():
    rng = np.random.default_rng(55)
    for n in (2, 3, 7, 15):
        for weight in (0.05, 0.3, 2.0):
            for _ in range(3):
                v = rng.normal(size=n) * 2.0
                direct = fused_lasso_prox(v, weight)
                dual = tv_prox_dual(v, weight, iters=20000)
                np.testing.assert_allclose(direct, dual, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5.0, 5.0), min_size=2, max_size=12),
       st.floats(0.01, 3.0))
def test_fused_prox_preserves_mean_and_improves_objective(values, weight):
    v = np.asarray(values)
    out = fused_lasso_prox(v, weight)

    def objective(a):
        return 0.5 * float(((a - v) ** 2).sum()) + weight * float(np.abs(np.diff(a)).sum())

    assert float(out.mean()) == pytest.approx(float(v.mean()), abs=1e-9)
    assert objective(out) <= objective(v) + 1e-12


def test_binned_nll_values(tn_data):
    problem = make_tf_problem(tn_data, order=0, lam=1.0, bins=8)
    assert binned_nll(problem, np.zeros(8)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        binned_nll(problem, np.full(8, 0.5))
    with pytest.raises(ValueError):
        binned_nll(problem, np.zeros(7))


def test_binned_mle_stationarity():
    counts = np.array([3.0, 7.0])
    theta = binned_mle_theta(counts)
    np.testing.assert_allclose(theta, [0.0, np.log(7.0 / 3.0)])
    problem = TfProblem(counts=counts, order=0, lam=0.0, rho=1.0,
                        split_matrix=np.eye(2), penalty="fused")
    h = 1e-6
    up = binned_nll(problem, np.array([0.0, theta[1] + h]))
    dn = binned_nll(problem, np.array([0.0, theta[1] - h]))
    assert abs((up - dn) / (2 * h)) < 1e-6


def test_make_tf_problem_defaults(tn_data):
    problem = make_tf_problem(tn_data, order=0, lam=0.7)
    assert problem.num_bins == tn_data.size + 1
    assert problem.rho == 0.7
    assert problem.n == tn_data.size
    assert make_tf_problem(tn_data, order=1, lam=0.0).rho == 1.0
    assert make_tf_problem(tn_data, order=2, lam=1.0, bins=9).split_matrix.shape == (7, 9)
    np.testing.assert_array_equal(
        make_tf_problem(tn_data, order=0, lam=1.0, bins=5).split_matrix, np.eye(5))
    with pytest.raises(ValueError):
        make_tf_problem(tn_data, order=3, lam=1.0)
    with pytest.raises(ValueError):
        make_tf_problem(tn_data, order=2, lam=1.0, bins=3)
    with pytest.raises(DataError):
        make_tf_problem(np.array([]), order=0, lam=1.0)


def test_tf_problem_validation():
    with pytest.raises(ValueError):
        TfProblem(counts=np.array([1.0]), order=0, lam=1.0, rho=1.0,
                  split_matrix=np.eye(1), penalty="fused")
    with pytest.raises(ValueError):
        TfProblem(counts=np.array([1.0, -2.0]), order=0, lam=1.0, rho=1.0,
                  split_matrix=np.eye(2), penalty="fused")
    with pytest.raises(ValueError):
        TfProblem(counts=np.array([1.0, 2.0]), order=0, lam=-1.0, rho=1.0,
                  split_matrix=np.eye(2), penalty="fused")
    with pytest.raises(ValueError):
        TfProblem(counts=np.array([1.0, 2.0]), order=0, lam=1.0, rho=0.0,
                  split_matrix=np.eye(2), penalty="fused")


def test_unpenalized_admm_matches_closed_form():
    counts = np.array([5.0, 9.0, 3.0, 7.0])
    problem = TfProblem(counts=counts, order=0, lam=0.0, rho=1.0,
                        split_matrix=np.eye(4), penalty="fused")
    fit = admm_fit(problem, AdmmConfig(tol_scale=1e-7))
    assert fit.converged
    np.testing.assert_allclose(fit.theta, binned_mle_theta(counts), atol=1e-6)


def test_admm_reaches_oracle_objective_order0(tn_data):
    problem = make_tf_problem(tn_data, order=0, lam=2.0, bins=25)
    fit = admm_fit(problem)
    assert fit.converged
    value = tf_objective(problem, fit.theta)
    oracle, _ = tf_oracle_objective(problem, iters=100000)
    assert value - oracle <= 1e-4 * abs(oracle)


def test_admm_reaches_oracle_objective_order1(tn_data):
    problem = make_tf_problem(tn_data, order=1, lam=1.0, bins=10)
    fit = admm_fit(problem)
    assert fit.converged
    value = tf_objective(problem, fit.theta)
    oracle, _ = tf_oracle_objective(problem, iters=100000)
    assert value - oracle <= 1e-4 * abs(oracle)


def test_heavy_penalty_forces_affine_theta(tn_data):
    problem = make_tf_problem(tn_data, order=1, lam=1e4, bins=12)
    fit = admm_fit(problem)
    assert float(np.max(np.abs(np.diff(fit.theta, n=2)))) <= 1e-6


def test_converged_residuals_respect_tolerances(tn_data):
    problem = make_tf_problem(tn_data, order=0, lam=2.0, bins=25)
    config = AdmmConfig()
    fit = admm_fit(problem, config)
    assert fit.converged
    r_norm, s_norm = fit.residuals[-1]
    m = problem.split_matrix.shape[0]
    assert r_norm <= config.tol_scale * np.sqrt(m)
    assert s_norm <= config.tol_scale * np.sqrt(problem.num_bins)
    assert fit.iterations == len(fit.residuals)


def test_tfpp_matrix_structure():
    h0 = tfpp_penalty_matrix(0, 4)
    np.testing.assert_array_equal(h0[0], [1, 0, 0, 0])
    np.testing.assert_array_equal(h0[1:], difference_matrix(1, 4))
    h1 = tfpp_penalty_matrix(1, 6)
    assert h1.shape == (6, 6)
    assert abs(np.linalg.det(h1)) > 1e-6
    np.testing.assert_allclose(h1[1], difference_matrix(1, 6)[0] * 6.0)


def test_tfpp_order0_matches_plain_objective(tn_data):
    # with theta_0 pinned the polynomial row of H contributes nothing at
    # order 0, so both variants minimize the same objective
    problem = make_tf_problem(tn_data, order=0, lam=2.0, bins=25)
    variant = tfpp_variant(problem)
    assert variant.penalty == "lasso"
    fit = admm_fit(variant)
    assert fit.converged
    value = tf_objective(problem, fit.theta)
    oracle, _ = tf_oracle_objective(problem, iters=100000)
    assert value - oracle <= 1e-4 * abs(oracle)


def test_tfpp_heavy_penalty_flattens_everything(tn_data):
    variant = tfpp_variant(make_tf_problem(tn_data, order=1, lam=1e5, bins=12))
    fit = admm_fit(variant)
    assert float(np.max(np.abs(fit.theta))) < 1e-3


def test_fit_density_normalizes(tn_data):
    fit = admm_fit(make_tf_problem(tn_data, order=0, lam=2.0, bins=16))
    total = float(fit.density @ fit.problem.widths)
    assert total == pytest.approx(1.0, abs=1e-12)
    assert np.all(fit.density > 0.0)


def test_fit_pdf_bin_lookup(tn_data):
    fit = admm_fit(make_tf_problem(tn_data, order=0, lam=2.0, bins=4))
    x = np.array([0.1, 0.3, 0.6, 0.9, 1.0])
    vals = fit.pdf(x)
    assert vals[3] == vals[4]  # x = 1.0 clamps into the last bin
    np.testing.assert_allclose(vals[:4], fit.density, atol=1e-12)
    with pytest.raises(SupportError):
        fit.pdf(np.array([1.2]))


def test_fit_csv_schema(tn_data, tmp_path):
    fit = admm_fit(make_tf_problem(tn_data, order=0, lam=2.0, bins=5))
    path = tmp_path / "tf.csv"
    fit.to_csv(str(path))
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "bin_left,bin_right,count,theta,density"
    assert len(lines) == 6
    cells = lines[1].split(",")
    assert float(cells[0]) == 0.0
    assert float(cells[1]) == 0.2
    assert float(cells[3]) == fit.theta[0] == 0.0
