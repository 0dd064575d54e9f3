"""Proximal solvers: oracle agreement, KKT optimality, traces, FLOP model."""

import dataclasses

import numpy as np
import pytest

from conftest import assert_kkt
from oracles import dense_newton_mle
from tvdensity.basis import make_basis_spec
from tvdensity.dgp import get_dgp, sample
from tvdensity.model import LogSplineProblem, QuadratureGrid, default_grid_size
from tvdensity.solvers import (
    ALGORITHMS,
    SolverConfig,
    SolverTrace,
    estimate_flops,
    fit_constrained,
    fit_penalized,
    kkt_residual,
    soft_threshold,
)


def _problem(dgp="truncated_normal", n=60, order=0, max_knots=20, seed=1):
    data = sample(get_dgp(dgp), n, seed=seed)
    spec = make_basis_spec(data, order=order, max_knots=max_knots)
    grid = QuadratureGrid.uniform(default_grid_size(n))
    return LogSplineProblem(spec, data, grid)


def _penalized_objective(problem, fit):
    return problem.value(fit.beta) + fit.penalty * float(np.abs(fit.beta).sum())


def test_soft_threshold_values():
    v = np.array([3.0, -0.5, 0.2, -4.0])
    np.testing.assert_allclose(soft_threshold(v, 1.0), [2.0, 0.0, 0.0, -3.0])
    np.testing.assert_allclose(soft_threshold(v, 0.0), v)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(algorithm="newton")
    with pytest.raises(ValueError):
        SolverConfig(lam=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(ls_beta=1.0)
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)


def test_per_algorithm_iteration_budgets():
    assert SolverConfig(algorithm="fista").resolved_max_iters == 20000
    assert SolverConfig(algorithm="prox_adagrad").resolved_max_iters == 20000
    assert SolverConfig(algorithm="prox_newton").resolved_max_iters == 200
    assert SolverConfig(algorithm="prox_newton_lbfgs").resolved_max_iters == 20000
    assert SolverConfig(algorithm="fista", max_iters=7).resolved_max_iters == 7


def test_zero_solution_above_penalty_anchor():
    problem = _problem()
    _, grad0 = problem.value_and_grad(np.zeros(problem.num_cols))
    anchor = float(np.max(np.abs(grad0)))
    for alg in ("prox_newton", "fista"):
        fit = fit_penalized(problem, SolverConfig(algorithm=alg, lam=1.01 * anchor))
        assert fit.active_set.size == 0
        assert fit.converged


def test_l1_norm_decreases_along_penalty_ladder():
    problem = _problem(n=80, seed=5)
    _, grad0 = problem.value_and_grad(np.zeros(problem.num_cols))
    anchor = float(np.max(np.abs(grad0)))
    norms = []
    warm = None
    for lam in anchor * np.array([0.5, 0.2, 0.08, 0.03]):
        fit = fit_penalized(problem, SolverConfig(lam=float(lam), warm_start=warm))
        warm = fit.beta
        norms.append(fit.l1_norm())
    assert all(a <= b + 1e-8 for a, b in zip(norms, norms[1:]))


def test_four_solvers_agree_on_one_instance():
    problem = _problem(n=60, order=0, max_knots=20, seed=1)
    _, grad0 = problem.value_and_grad(np.zeros(problem.num_cols))
    lam = 0.05 * float(np.max(np.abs(grad0)))
    objs = {}
    for alg in ALGORITHMS:
        config = SolverConfig(algorithm=alg, lam=lam)
        fit = fit_penalized(problem, config)
        assert fit.converged, alg
        assert_kkt(problem, fit, config)
        objs[alg] = _penalized_objective(problem, fit)
    best = min(objs.values())
    for alg, obj in objs.items():
        assert (obj - best) / max(1.0, abs(best)) < 1e-5, alg


def test_unpenalized_fit_matches_dense_newton():
    problem = _problem(n=50, order=0, max_knots=8, seed=21)
    oracle = problem.value(dense_newton_mle(problem))
    fit = fit_penalized(problem, SolverConfig(algorithm="prox_newton", lam=0.0, ridge_h=1e-10))
    assert fit.converged
    gap = (problem.value(fit.beta) - oracle) / max(1.0, abs(oracle))
    assert abs(gap) < 1e-8


def test_kkt_residual_helper():
    grad = np.array([0.5, -2.0, 0.1])
    beta = np.array([0.0, 1.0, 0.0])
    lam_vec = np.array([1.0, 1.0, 1.0])
    # active coord: grad + lam*sign = -1; inactive: soft threshold of grad
    assert kkt_residual(grad, beta, lam_vec) == 1.0
    assert kkt_residual(np.array([0.3]), np.array([0.0]), np.array([1.0])) == 0.0


def test_trace_records_and_monotone_newton():
    problem = _problem(n=60, seed=3)
    fit = fit_penalized(problem, SolverConfig(algorithm="prox_newton", lam=0.5))
    trace = fit.trace
    assert trace.records[0].iteration == 0
    objs = trace.objectives()
    assert np.all(np.diff(objs) <= 1e-10 * (1.0 + np.abs(objs[:-1])))
    assert trace.records[0].flops_cumulative == 0
    flops = [r.flops_cumulative for r in trace.records[1:]]
    assert all(b > a for a, b in zip(flops, flops[1:])) or len(flops) <= 1


def test_trace_csv_schema(tmp_path):
    problem = _problem(n=60, seed=3)
    fit = fit_penalized(problem, SolverConfig(algorithm="fista", lam=0.5))
    path = tmp_path / "trace.csv"
    fit.trace.to_csv(str(path))
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "iter,objective,active_set,step_size,flops"
    first = lines[1].split(",")
    assert int(first[0]) == 0 and int(first[4]) == 0
    float(first[1])  # objective parses


def test_flop_model_first_order_cost():
    trace = SolverTrace(algorithm="fista", n=100, grid_size=1000, num_cols=103)
    trace.add(0, 10.0, 0, 0.0)
    trace.add(1, 9.0, 5, 1.0)
    trace.add(2, 8.5, 6, 0.5)
    per_iter, cum = estimate_flops(SolverConfig(algorithm="fista"), 100, 1000, 103, trace)
    # 2 (n + G) K = 2 * 1100 * 103, independent of the step size
    np.testing.assert_array_equal(per_iter, [226600, 226600])
    np.testing.assert_array_equal(cum, [226600, 453200])


def test_flop_model_newton_and_lbfgs_costs():
    base = 2 * (100 + 1000) * 103
    trace = SolverTrace(algorithm="prox_newton", n=100, grid_size=1000, num_cols=103)
    trace.add(0, 10.0, 0, 0.0)
    trace.add(1, 9.0, 5, 0.5)  # one backtrack at ls_beta = 0.5
    per_iter, _ = estimate_flops(SolverConfig(algorithm="prox_newton"), 100, 1000, 103, trace)
    expected = 2 * 1000 * 103**2 + 2 * 5 * 103**2 + 2 * base
    np.testing.assert_array_equal(per_iter, [expected])

    trace = SolverTrace(algorithm="prox_newton_lbfgs", n=100, grid_size=1000, num_cols=103)
    trace.add(0, 10.0, 0, 0.0)
    trace.add(1, 9.0, 5, 0.25)  # two backtracks
    per_iter, _ = estimate_flops(
        SolverConfig(algorithm="prox_newton_lbfgs"), 100, 1000, 103, trace
    )
    np.testing.assert_array_equal(per_iter, [3 * base])


def test_warm_start_at_solution_converges_immediately():
    problem = _problem(n=60, seed=7)
    config = SolverConfig(algorithm="prox_newton", lam=0.8)
    fit = fit_penalized(problem, config)
    rerun = fit_penalized(problem, dataclasses.replace(config, warm_start=fit.beta))
    assert rerun.converged
    assert len(rerun.trace.records) <= 3
    assert abs(_penalized_objective(problem, rerun) - _penalized_objective(problem, fit)) < 1e-10


def test_warm_start_length_validated():
    problem = _problem()
    with pytest.raises(ValueError):
        fit_penalized(problem, SolverConfig(warm_start=np.zeros(3)))


def test_unpenalized_parametric_block():
    problem = _problem(dgp="step", n=100, order=1, max_knots=15, seed=9)
    config = SolverConfig(lam=1e4, penalize_parametric=False)
    fit = fit_penalized(problem, config)
    # knots are forced to zero but the linear trend still fits the data
    assert np.all(np.abs(fit.beta[2:]) < 1e-12)
    assert abs(fit.beta[1]) > 0.05
    assert_kkt(problem, fit, config)


def test_fit_constrained_matches_l1_bound():
    problem = _problem(n=80, seed=11)
    loose = fit_penalized(problem, SolverConfig(lam=0.3))
    target = 0.5 * loose.l1_norm()
    fit = fit_constrained(problem, target, SolverConfig())
    assert abs(fit.l1_norm() - target) <= 0.011 * target
    with pytest.raises(ValueError):
        fit_constrained(problem, 0.0, SolverConfig())
