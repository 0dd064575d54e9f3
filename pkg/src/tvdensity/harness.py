"""Monte Carlo experiment driver: convergence, coverage, efficiency, solver bench.

Every experiment follows the same seeding protocol: replicate ``r`` of DGP
``d`` at sample size ``n`` draws its data from
``SeedSequence((master_seed, dgp_index(d), n, r))`` and reuses that stream's
first word to assign cross-validation folds, so results are reproducible
replicate by replicate and independent of execution order.  Failed replicate
fits are dropped and counted; a cell with more than ``max_failure_rate``
failures aborts the experiment.  All tabular output is CSV with fixed
headers; a JSON manifest records the plan, version, and wall time.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .basis import make_basis_spec
from .cv import CvPlan, CvResult, cross_validate, default_lambda_grid
from .dgp import DgpSpec, dgp_index, get_dgp, sample, true_cdf, true_density, true_moment, true_quantile
from .errors import ExperimentError, TvdError
from .inference import DEFAULT_RIDGE_SCALE, Z_95, delta_method_band
from .model import LogSplineProblem, QuadratureGrid, default_grid_size
from .solvers import SolverConfig, estimate_flops, fit_penalized
from .targeting import EstimandSpec, eic_confidence_interval, parse_estimand, tmle_target
from .trendfilter import admm_fit, make_tf_problem

logger = logging.getLogger(__name__)

EXPERIMENT_NAMES = ("convergence", "coverage", "estimand_coverage", "efficiency", "bench")


@dataclass(frozen=True)
class ExperimentPlan:
    """Declarative description of a simulation run, loadable from JSON."""

    dgps: tuple[str, ...] = ("truncated_normal",)
    ns: tuple[int, ...] = (50, 100, 200, 400)
    replicates: int = 100
    master_seed: int = 42
    estimators: tuple[str, ...] = ("hal",)
    experiments: tuple[str, ...] = ("convergence",)
    out_dir: str = "results"
    orders: tuple[int, ...] = (0, 1, 2)
    folds: int = 5
    lambda_points: int = 12
    lambda_span: float = 1e4
    max_knots: int | None = 64
    undersmooth_factor: float = 1.0
    ridge_scale: float = DEFAULT_RIDGE_SCALE
    grid_points: int = 201
    estimands: tuple[str, ...] = ("mean", "moment:2", "survival:0.5", "median")
    tf_order: int = 0
    bench_n: int = 200
    bench_order: int = 2
    bench_lambda: float = 5.0
    max_failure_rate: float = 0.05

    def __post_init__(self) -> None:
        for name in ("dgps", "ns", "estimators", "experiments", "orders", "estimands"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if not self.ns or any(n < 25 for n in self.ns):
            raise ValueError("all sample sizes must be at least 25")
        for name in self.dgps:
            get_dgp(name)
        unknown = set(self.estimators) - {"hal", "tf"}
        if unknown or not self.estimators:
            raise ValueError(f"unknown estimators: {sorted(unknown)}")
        bad = set(self.experiments) - set(EXPERIMENT_NAMES)
        if bad:
            raise ValueError(f"unknown experiments: {sorted(bad)}")
        for text in self.estimands:
            parse_estimand(text)
        if not 0.0 <= self.max_failure_rate < 1.0:
            raise ValueError("max_failure_rate must be in [0, 1)")


def plan_to_dict(plan: ExperimentPlan) -> dict:
    out = dataclasses.asdict(plan)
    for key, value in out.items():
        if isinstance(value, tuple):
            out[key] = list(value)
    return out


def plan_from_dict(raw: dict) -> ExperimentPlan:
    known = {f.name for f in dataclasses.fields(ExperimentPlan)}
    bad = set(raw) - known
    if bad:
        raise ValueError(f"unknown plan fields: {sorted(bad)}")
    return ExperimentPlan(**raw)


def load_plan(path: str) -> ExperimentPlan:
    with open(path, "r", encoding="utf-8") as handle:
        return plan_from_dict(json.load(handle))


def replicate_seed(master_seed: int, dgp_name: str, n: int, r: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((master_seed, dgp_index(dgp_name), n, r))


def _fold_seed(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


def fit_replicate(data: np.ndarray, plan: ExperimentPlan, fold_seed: int) -> CvResult:
    """The shared per-replicate estimator: CV over (lambda, order), then refit."""
    lam_grid = default_lambda_grid(
        data, size=plan.lambda_points, span=plan.lambda_span, max_knots=plan.max_knots
    )
    cv_plan = CvPlan(
        folds=plan.folds,
        lambda_grid=lam_grid,
        orders=plan.orders,
        seed=fold_seed,
        undersmooth_factor=plan.undersmooth_factor,
        max_knots=plan.max_knots,
    )
    return cross_validate(data, cv_plan)


@dataclass
class FailureTally:
    """Per-cell failed/attempted counts with the >5% abort rule."""

    max_rate: float
    attempted: dict = field(default_factory=dict)
    failed: dict = field(default_factory=dict)

    def attempt(self, cell: tuple) -> None:
        self.attempted[cell] = self.attempted.get(cell, 0) + 1

    def fail(self, cell: tuple, exc: Exception) -> None:
        self.failed[cell] = self.failed.get(cell, 0) + 1
        logger.warning("replicate failure at %s: %s", cell, exc)

    def check(self) -> None:
        for cell, total in self.attempted.items():
            bad = self.failed.get(cell, 0)
            if total > 0 and bad > self.max_rate * total:
                raise ExperimentError(
                    f"cell {cell}: {bad}/{total} replicate failures exceeds "
                    f"the {self.max_rate:.0%} budget"
                )

    def as_dict(self) -> dict:
        return {
            "attempted": {str(k): v for k, v in self.attempted.items()},
            "failed": {str(k): v for k, v in self.failed.items()},
        }


def _loglog_fit(ns: list[int], medians: list[float]) -> tuple[float, float, float]:
    """OLS of log(median error) on log(n): slope, intercept, R^2."""
    x = np.log(np.asarray(ns, dtype=np.float64))
    y = np.log(np.asarray(medians, dtype=np.float64))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = y - y.mean()
    denom = float(total @ total)
    r2 = 1.0 - float(resid @ resid) / denom if denom > 0 else 1.0
    return float(slope), float(intercept), r2


def _tf_replicate_density(data: np.ndarray, plan: ExperimentPlan, fold_seed: int):
    """Trend-filter estimator with a small holdout search over the penalty."""
    n = data.size
    bins = n + 1
    lam_grid = np.geomspace(0.5 * n, 0.5, 6)
    rng = np.random.default_rng(fold_seed)
    mask = rng.permutation(n) % 2 == 0
    train, hold = data[mask], data[~mask]
    best_lam, best_score = None, -np.inf
    for lam in lam_grid:
        try:
            fit = admm_fit(make_tf_problem(train, plan.tf_order, float(lam), bins=bins))
        except TvdError:
            continue
        score = float(fit.log_pdf(hold).sum())
        if score > best_score:
            best_lam, best_score = float(lam), score
    if best_lam is None:
        raise ExperimentError("trend-filter penalty search failed on every candidate")
    return admm_fit(make_tf_problem(data, plan.tf_order, best_lam, bins=bins))


@dataclass
class ConvergenceResult:
    """Sup-norm error samples and the per-DGP log-log scaling fit."""

    rows: list[tuple[str, str, int, int, float]]  # estimator, dgp, n, replicate, sup_error
    medians: dict  # (estimator, dgp, n) -> median sup error
    fits: dict  # (estimator, dgp) -> (slope, intercept, r2)
    tally: FailureTally

    def errors_for(self, dgp: str, n: int, estimator: str = "hal") -> np.ndarray:
        return np.array([r[4] for r in self.rows if r[:3] == (estimator, dgp, n)])

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("estimator,dgp,n,replicate,sup_error\n")
            for est, dgp, n, r, err in self.rows:
                handle.write(f"{est},{dgp},{n},{r},{err!r}\n")

    def summary_to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("estimator,dgp,n,median_sup_error,slope,intercept,r_squared\n")
            for (est, dgp, n), med in self.medians.items():
                slope, intercept, r2 = self.fits[(est, dgp)]
                handle.write(f"{est},{dgp},{n},{med!r},{slope!r},{intercept!r},{r2!r}\n")


def run_uniform_convergence(plan: ExperimentPlan) -> ConvergenceResult:
    """Sup-norm error over a 201-point grid per replicate; log-log slope per DGP."""
    tally = FailureTally(plan.max_failure_rate)
    x_grid = np.linspace(0.0, 1.0, plan.grid_points)
    rows: list[tuple[str, str, int, int, float]] = []
    medians: dict = {}
    fits: dict = {}
    for estimator in plan.estimators:
        for dgp_name in plan.dgps:
            spec = get_dgp(dgp_name)
            truth = true_density(spec, x_grid)
            med_ns, med_vals = [], []
            for n in plan.ns:
                errs = []
                for r in range(plan.replicates):
                    cell = (estimator, dgp_name, n)
                    tally.attempt(cell)
                    seq = replicate_seed(plan.master_seed, dgp_name, n, r)
                    data = sample(spec, n, seed=seq)
                    try:
                        if estimator == "hal":
                            fit = fit_replicate(data, plan, _fold_seed(seq)).fit
                        else:
                            fit = _tf_replicate_density(data, plan, _fold_seed(seq))
                        dens = fit.pdf(x_grid)
                    except TvdError as exc:
                        tally.fail(cell, exc)
                        continue
                    err = float(np.max(np.abs(dens - truth)))
                    rows.append((estimator, dgp_name, n, r, err))
                    errs.append(err)
                if errs:
                    med = float(np.median(errs))
                    medians[(estimator, dgp_name, n)] = med
                    med_ns.append(n)
                    med_vals.append(med)
            if len(med_ns) >= 2:
                fits[(estimator, dgp_name)] = _loglog_fit(med_ns, med_vals)
            else:
                fits[(estimator, dgp_name)] = (math.nan, math.nan, math.nan)
    tally.check()
    return ConvergenceResult(rows=rows, medians=medians, fits=fits, tally=tally)


def _estimand_truth(spec: DgpSpec, est: EstimandSpec) -> float:
    if est.kind == "moment":
        return true_moment(spec, est.moment_order)
    if est.kind == "survival":
        return 1.0 - float(true_cdf(spec, np.array([est.x0]))[0])
    if est.kind == "cdf":
        return float(true_cdf(spec, np.array([est.x0]))[0])
    return true_quantile(spec, est.q)


def _classical_estimate(est: EstimandSpec, data: np.ndarray) -> float:
    if est.kind == "moment":
        return float(np.mean(data**est.moment_order))
    if est.kind == "survival":
        return float(np.mean(data > est.x0))
    if est.kind == "cdf":
        return float(np.mean(data <= est.x0))
    return float(np.quantile(data, est.q))


@dataclass
class CellBundle:
    """Everything measured on one (dgp, n) cell from shared replicate fits."""

    dgp: str
    n: int
    x_grid: np.ndarray | None = None
    truth: np.ndarray | None = None
    densities: list[np.ndarray] = field(default_factory=list)
    covered: list[np.ndarray] = field(default_factory=list)
    estimand_truth: dict = field(default_factory=dict)
    tmle_values: dict = field(default_factory=dict)
    eic_covered: dict = field(default_factory=dict)
    plugin_values: dict = field(default_factory=dict)
    classical_values: dict = field(default_factory=dict)
    completed: int = 0

    def estimated_coverage(self) -> float:
        return float(np.mean(np.stack(self.covered)))

    def oracle_coverage(self) -> float:
        if len(self.densities) < 2:
            raise ExperimentError("oracle coverage needs at least 2 completed replicates")
        dens = np.stack(self.densities)
        sd = dens.std(axis=0, ddof=1)
        return float(np.mean(np.abs(dens - self.truth[None, :]) <= Z_95 * sd[None, :]))

    def eic_coverage(self, label: str) -> float:
        return float(np.mean(self.eic_covered[label]))

    def oracle_estimand_coverage(self, label: str) -> float:
        vals = np.asarray(self.tmle_values[label])
        if vals.size < 2:
            raise ExperimentError("oracle coverage needs at least 2 completed replicates")
        sd = vals.std(ddof=1)
        return float(np.mean(np.abs(vals - self.estimand_truth[label]) <= Z_95 * sd))


def run_cell_bundle(
    plan: ExperimentPlan,
    dgp_name: str,
    n: int,
    with_bands: bool = True,
    with_estimands: bool = True,
    tally: FailureTally | None = None,
) -> CellBundle:
    """Fit each replicate once; collect band coverage and estimand reports."""
    spec = get_dgp(dgp_name)
    bundle = CellBundle(dgp=dgp_name, n=n)
    if with_bands:
        lo = true_quantile(spec, 1.0 / (n + 1))
        hi = true_quantile(spec, n / (n + 1.0))
        bundle.x_grid = np.linspace(lo, hi, plan.grid_points)
        bundle.truth = true_density(spec, bundle.x_grid)
    est_specs = [parse_estimand(text) for text in plan.estimands] if with_estimands else []
    for est in est_specs:
        label = est.label()
        bundle.estimand_truth[label] = _estimand_truth(spec, est)
        bundle.tmle_values[label] = []
        bundle.eic_covered[label] = []
        bundle.plugin_values[label] = []
        bundle.classical_values[label] = []
    own_tally = tally is None
    if own_tally:
        tally = FailureTally(plan.max_failure_rate)
    cell = (dgp_name, n)
    for r in range(plan.replicates):
        tally.attempt(cell)
        seq = replicate_seed(plan.master_seed, dgp_name, n, r)
        data = sample(spec, n, seed=seq)
        try:
            fit = fit_replicate(data, plan, _fold_seed(seq)).fit
            if with_bands:
                band = delta_method_band(fit, data, bundle.x_grid, ridge_scale=plan.ridge_scale)
            reports = {}
            for est in est_specs:
                reports[est.label()] = tmle_target(fit, est, data)
        except TvdError as exc:
            tally.fail(cell, exc)
            continue
        if with_bands:
            bundle.densities.append(band.density)
            bundle.covered.append((band.lo <= bundle.truth) & (bundle.truth <= band.hi))
        for est in est_specs:
            label = est.label()
            report = reports[label]
            lo_ci, hi_ci = eic_confidence_interval(report)
            truth_val = bundle.estimand_truth[label]
            bundle.tmle_values[label].append(report.tmle_value)
            bundle.eic_covered[label].append(lo_ci <= truth_val <= hi_ci)
            bundle.plugin_values[label].append(report.plugin_value)
            bundle.classical_values[label].append(_classical_estimate(est, data))
        bundle.completed += 1
    if own_tally:
        tally.check()
    return bundle


@dataclass
class CoverageResult:
    cells: dict  # (dgp, n) -> (estimated, oracle, completed)
    tally: FailureTally

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("dgp,n,estimated_coverage,oracle_coverage,completed\n")
            for (dgp, n), (est, orc, done) in self.cells.items():
                handle.write(f"{dgp},{n},{est!r},{orc!r},{done}\n")


def run_coverage(plan: ExperimentPlan) -> CoverageResult:
    """Delta-method band coverage of the true density, plus the oracle pair."""
    tally = FailureTally(plan.max_failure_rate)
    cells = {}
    for dgp_name in plan.dgps:
        for n in plan.ns:
            bundle = run_cell_bundle(
                plan, dgp_name, n, with_bands=True, with_estimands=False, tally=tally
            )
            cells[(dgp_name, n)] = (
                bundle.estimated_coverage(),
                bundle.oracle_coverage(),
                bundle.completed,
            )
    tally.check()
    return CoverageResult(cells=cells, tally=tally)


@dataclass
class EstimandCoverageResult:
    cells: dict  # (dgp, n, label) -> (eic, oracle, completed)
    tally: FailureTally

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("dgp,n,estimand,eic_coverage,oracle_coverage,completed\n")
            for (dgp, n, label), (eic_cov, orc, done) in self.cells.items():
                handle.write(f"{dgp},{n},{label},{eic_cov!r},{orc!r},{done}\n")


def run_estimand_coverage(plan: ExperimentPlan) -> EstimandCoverageResult:
    """EIC-interval coverage of each estimand after targeting, plus oracle."""
    tally = FailureTally(plan.max_failure_rate)
    cells = {}
    for dgp_name in plan.dgps:
        for n in plan.ns:
            bundle = run_cell_bundle(
                plan, dgp_name, n, with_bands=False, with_estimands=True, tally=tally
            )
            for text in plan.estimands:
                label = parse_estimand(text).label()
                cells[(dgp_name, n, label)] = (
                    bundle.eic_coverage(label),
                    bundle.oracle_estimand_coverage(label),
                    bundle.completed,
                )
    tally.check()
    return EstimandCoverageResult(cells=cells, tally=tally)


@dataclass
class EfficiencyResult:
    rows: list[tuple]  # dgp, n, estimand, estimator, bias, variance, mse, abs_bias_over_sd
    tally: FailureTally

    def metrics(self, dgp: str, n: int, label: str, estimator: str) -> tuple:
        for row in self.rows:
            if row[:4] == (dgp, n, label, estimator):
                return row[4:]
        raise KeyError((dgp, n, label, estimator))

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("dgp,n,estimand,estimator,bias,variance,mse,abs_bias_over_sd\n")
            for dgp, n, label, estimator, bias, var, mse, ratio in self.rows:
                handle.write(f"{dgp},{n},{label},{estimator},{bias!r},{var!r},{mse!r},{ratio!r}\n")


def _efficiency_metrics(values: list[float], truth: float) -> tuple[float, float, float, float]:
    vals = np.asarray(values, dtype=np.float64)
    bias = float(vals.mean() - truth)
    var = float(vals.var(ddof=1)) if vals.size > 1 else 0.0
    mse = float(np.mean((vals - truth) ** 2))
    sd = math.sqrt(var)
    ratio = abs(bias) / sd if sd > 0 else math.inf
    return bias, var, mse, ratio


def run_efficiency(plan: ExperimentPlan) -> EfficiencyResult:
    """Bias, variance, and MSE of plug-in, TMLE, and the classical estimator."""
    tally = FailureTally(plan.max_failure_rate)
    rows = []
    for dgp_name in plan.dgps:
        for n in plan.ns:
            bundle = run_cell_bundle(
                plan, dgp_name, n, with_bands=False, with_estimands=True, tally=tally
            )
            for text in plan.estimands:
                label = parse_estimand(text).label()
                truth_val = bundle.estimand_truth[label]
                for estimator, values in (
                    ("plugin", bundle.plugin_values[label]),
                    ("tmle", bundle.tmle_values[label]),
                    ("classical", bundle.classical_values[label]),
                ):
                    rows.append((dgp_name, n, label, estimator) + _efficiency_metrics(values, truth_val))
    tally.check()
    return EfficiencyResult(rows=rows, tally=tally)


@dataclass
class BenchResult:
    summary: list[tuple]  # algorithm, iterations, converged, final_objective, active, flops
    traces: dict  # algorithm -> SolverTrace

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("algorithm,iterations,converged,final_objective,active_set,cumulative_flops\n")
            for alg, iters, conv, obj, active, flops in self.summary:
                handle.write(f"{alg},{iters},{conv},{obj!r},{active},{flops}\n")


ALGORITHMS = ("fista", "prox_adagrad", "prox_newton", "prox_newton_lbfgs")


def run_solver_bench(plan: ExperimentPlan) -> BenchResult:
    """All four solvers on one fixed problem from identical zero starts."""
    dgp_name = plan.dgps[0]
    spec = get_dgp(dgp_name)
    seq = replicate_seed(plan.master_seed, dgp_name, plan.bench_n, 0)
    data = sample(spec, plan.bench_n, seed=seq)
    basis = make_basis_spec(data, order=plan.bench_order, max_knots=plan.max_knots)
    grid = QuadratureGrid.uniform(default_grid_size(data.size))
    problem = LogSplineProblem(basis, data, grid)
    summary = []
    traces = {}
    finals = {}
    for alg in ALGORITHMS:
        config = SolverConfig(algorithm=alg, lam=plan.bench_lambda)
        fit = fit_penalized(problem, config)
        trace = fit.trace
        _, cum = estimate_flops(config, data.size, grid.midpoints.size, basis.num_columns, trace)
        last = trace.records[-1]
        finals[alg] = last.objective
        summary.append(
            (alg, last.iteration, fit.converged, last.objective, last.active_set_size, int(cum[-1]))
        )
        traces[alg] = trace
    best = min(finals.values())
    scale = max(1.0, abs(best))

    def iters_to_gap(alg: str, gap: float) -> int | None:
        for rec in traces[alg].records:
            if (rec.objective - best) / scale <= gap:
                return rec.iteration
        return None

    newton_it = iters_to_gap("prox_newton", 1e-6)
    fista_it = iters_to_gap("fista", 1e-6)
    if newton_it is not None and fista_it is not None and newton_it > fista_it:
        logger.warning(
            "prox_newton needed %d iterations vs %d for fista to reach the 1e-6 gap",
            newton_it,
            fista_it,
        )
    return BenchResult(summary=summary, traces=traces)


def run_experiments(plan: ExperimentPlan) -> dict:
    """Run every experiment in the plan; write CSVs and a JSON manifest."""
    os.makedirs(plan.out_dir, exist_ok=True)
    start = time.time()
    outputs = []
    failures = {}

    def out(name: str) -> str:
        path = os.path.join(plan.out_dir, name)
        outputs.append(name)
        return path

    for experiment in plan.experiments:
        if experiment == "convergence":
            conv = run_uniform_convergence(plan)
            conv.to_csv(out("convergence_errors.csv"))
            conv.summary_to_csv(out("convergence_summary.csv"))
            failures["convergence"] = conv.tally.as_dict()
        elif experiment == "coverage":
            cov = run_coverage(plan)
            cov.to_csv(out("coverage.csv"))
            failures["coverage"] = cov.tally.as_dict()
        elif experiment == "estimand_coverage":
            est_cov = run_estimand_coverage(plan)
            est_cov.to_csv(out("estimand_coverage.csv"))
            failures["estimand_coverage"] = est_cov.tally.as_dict()
        elif experiment == "efficiency":
            eff = run_efficiency(plan)
            eff.to_csv(out("efficiency.csv"))
            failures["efficiency"] = eff.tally.as_dict()
        elif experiment == "bench":
            bench = run_solver_bench(plan)
            bench.to_csv(out("solver_bench.csv"))
            for alg, trace in bench.traces.items():
                trace.to_csv(out(f"solver_trace_{alg}.csv"))
    manifest = {
        "plan": plan_to_dict(plan),
        "master_seed": plan.master_seed,
        "version": f"tvdensity-{__version__}",
        "wall_time_seconds": round(time.time() - start, 3),
        "outputs": outputs,
        "failures": failures,
    }
    with open(os.path.join(plan.out_dir, "manifest.json"), "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2)
    return manifest
