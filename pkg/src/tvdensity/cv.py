"""Cross-validation over (penalty, order) and undersmoothing.

A deterministic descending log-grid of penalty levels is searched jointly
with the basis order by K-fold CV on held-out negative log likelihood.  Fits
along the grid are warm started from the previous penalty's solution.  The
held-out score uses the same global quadrature grid as the training fits so
the normalizing constants are comparable across folds.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .basis import make_basis_spec, validate_support
from .errors import SolverError, TvdError
from .model import (
    FittedDensity,
    LogSplineProblem,
    QuadratureGrid,
    default_grid_size,
    neg_log_likelihood,
)
from .solvers import SolverConfig, fit_constrained, fit_penalized


@dataclass(frozen=True)
class CvPlan:
    """Search space and bookkeeping for cross-validation.

    ``lambda_grid`` must be descending; ``orders`` a subset of {0, 1, 2};
    ``undersmooth_factor`` >= 1 inflates the selected L1 norm after
    selection (1 = off).  ``max_knots`` caps the per-fold knot count by
    quantile thinning; the cap matters because with one knot per datum the
    narrowest inter-knot cells fall below the quadrature spacing, where the
    normalizer cannot see them and small penalties let the likelihood
    diverge.  ``max_knots=None`` removes the cap.
    """

    folds: int = 5
    lambda_grid: np.ndarray = field(default_factory=lambda: np.geomspace(1e3, 1e-2, 30))
    orders: tuple[int, ...] = (0, 1, 2)
    seed: int = 0
    undersmooth_factor: float = 1.0
    max_knots: int | None = 64

    def __post_init__(self) -> None:
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        grid = np.asarray(self.lambda_grid, dtype=np.float64)
        if grid.size == 0:
            raise ValueError("lambda_grid must be nonempty")
        if np.any(np.diff(grid) >= 0.0):
            raise ValueError("lambda_grid must be sorted descending")
        if np.any(grid < 0.0):
            raise ValueError("lambda_grid must be nonnegative")
        object.__setattr__(self, "lambda_grid", grid)
        if not self.orders or any(k not in (0, 1, 2) for k in self.orders):
            raise ValueError("orders must be a nonempty subset of {0, 1, 2}")
        if self.undersmooth_factor < 1.0:
            raise ValueError("undersmooth_factor must be >= 1")


@dataclass
class CvResult:
    best_lambda: float
    best_order: int
    table: list[tuple[int, float, int, float]]
    fit: FittedDensity
    cv_l1_norm: float

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("order,lambda,fold,holdout_nll\n")
            for order, lam, fold, loss in self.table:
                handle.write(f"{order},{float(lam)!r},{fold},{float(loss)!r}\n")
            handle.write(f"# selected,order={self.best_order},lambda={float(self.best_lambda)!r}\n")


def make_folds(n: int, folds: int, seed: int) -> np.ndarray:
    """Deterministic fold labels in {0, ..., folds-1}, sizes differing by <= 1."""
    if n < folds:
        raise ValueError(f"cannot split {n} points into {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=np.int64)
    labels[perm] = np.arange(n) % folds
    return labels


def default_lambda_grid(
    data: np.ndarray,
    size: int = 30,
    span: float = 1e5,
    order: int = 0,
    grid: QuadratureGrid | None = None,
    max_knots: int | None = None,
) -> np.ndarray:
    """Descending log grid anchored at the smallest penalty that zeroes the fit.

    The anchor is the sup norm of the unpenalized score at beta = 0; above it
    the all-zero coefficient vector is optimal, so the grid spans
    ``[anchor/span, anchor]``.
    """
    data = validate_support(data)
    if grid is None:
        grid = QuadratureGrid.uniform(default_grid_size(data.size))
    spec = make_basis_spec(data, order=order, max_knots=max_knots)
    problem = LogSplineProblem(spec, data, grid)
    _, grad0 = problem.value_and_grad(np.zeros(problem.num_cols))
    anchor = float(np.max(np.abs(grad0)))
    anchor = max(anchor, 1e-6)
    return np.geomspace(anchor, anchor / span, size)


def _path_fits(
    problem: LogSplineProblem, lambdas: np.ndarray, config: SolverConfig
) -> list[FittedDensity | None]:
    """Warm-started fits down a descending penalty path; failures become None."""
    fits: list[FittedDensity | None] = []
    warm = None
    for lam in lambdas:
        cfg = dataclasses.replace(config, lam=float(lam), warm_start=warm)
        try:
            fit = fit_penalized(problem, cfg)
        except SolverError:
            fits.append(None)
            continue
        fits.append(fit)
        warm = fit.beta
    return fits


def cross_validate(
    data: np.ndarray, plan: CvPlan, solver_config: SolverConfig | None = None
) -> CvResult:
    """K-fold CV over (order, lambda); refit on all data at the selection.

    Selection minimizes the summed held-out NLL; ties prefer the larger
    penalty, then the smaller order.  Failed and unconverged fold fits both
    score +inf, so only cells whose fold problems all solved cleanly compete.
    The returned fit is undersmoothed when the plan asks for it.
    """
    data = validate_support(data)
    if solver_config is None:
        solver_config = SolverConfig()
    n = data.size
    labels = make_folds(n, plan.folds, plan.seed)
    grid = QuadratureGrid.uniform(default_grid_size(n))
    lambdas = plan.lambda_grid
    total = {}
    table: list[tuple[int, float, int, float]] = []
    cells: dict[tuple[int, int], list[float]] = {}
    for order in plan.orders:
        for fold in range(plan.folds):
            train = data[labels != fold]
            val = data[labels == fold]
            spec = make_basis_spec(train, order=order, max_knots=plan.max_knots)
            problem = LogSplineProblem(spec, train, grid)
            fits = _path_fits(problem, lambdas, solver_config)
            for li, fit in enumerate(fits):
                if fit is None or not fit.converged:
                    # a fold fit that hit its iteration cap is diverging at
                    # small penalties far more often than it is merely slow,
                    # and its holdout score can look spuriously good when the
                    # quadrature grid cannot see narrow likelihood spikes
                    loss = np.inf
                else:
                    loss = neg_log_likelihood(spec, fit.beta, val, grid)
                    if not np.isfinite(loss):
                        loss = np.inf
                cells.setdefault((order, li), []).append(float(loss))
                table.append((order, float(lambdas[li]), fold, float(loss)))
    for (order, li), losses in cells.items():
        total[(order, li)] = sum(losses)
    # ties prefer larger lambda (smaller grid index) then smaller order
    best_key = min(total, key=lambda key: (total[key], key[1], key[0]))
    if not np.isfinite(total[best_key]):
        raise TvdError("cross-validation failed: every (order, lambda) cell diverged")
    best_order, best_li = best_key
    best_lambda = float(lambdas[best_li])
    final_spec = make_basis_spec(data, order=best_order, max_knots=plan.max_knots)
    final_problem = LogSplineProblem(final_spec, data, grid)
    path = _path_fits(final_problem, lambdas[: best_li + 1], solver_config)
    fit = path[-1]
    if fit is None:
        cfg = dataclasses.replace(solver_config, lam=best_lambda, warm_start=None)
        fit = fit_penalized(final_problem, cfg)
    cv_l1 = fit.l1_norm()
    if plan.undersmooth_factor > 1.0 and cv_l1 > 0.0:
        cfg = dataclasses.replace(solver_config, warm_start=fit.beta)
        fit = fit_constrained(final_problem, plan.undersmooth_factor * cv_l1, cfg)
    return CvResult(
        best_lambda=best_lambda,
        best_order=best_order,
        table=table,
        fit=fit,
        cv_l1_norm=cv_l1,
    )


def undersmooth(
    fit: FittedDensity,
    data: np.ndarray,
    factor: float,
    solver_config: SolverConfig | None = None,
) -> FittedDensity:
    """Refit with the L1 norm inflated to ``factor`` times the fit's norm."""
    if factor < 1.0:
        raise ValueError("undersmooth factor must be >= 1")
    data = validate_support(data)
    if solver_config is None:
        solver_config = SolverConfig()
    if factor == 1.0:
        return fit
    target = factor * fit.l1_norm()
    if target <= 0.0:
        return fit
    problem = LogSplineProblem(fit.spec, data, fit.grid)
    cfg = dataclasses.replace(solver_config, warm_start=fit.beta)
    return fit_constrained(problem, target, cfg)
