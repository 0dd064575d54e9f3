"""Log-spline density model on [0, 1] and its quadrature machinery.

A coefficient vector ``beta`` over a truncated power basis defines the
unnormalized log density ``f(x) = phi(x) . beta``.  The density is
``p(x) = exp(f(x)) / C`` with ``C = integral exp(f)``, approximated by
midpoint quadrature on a fixed bin grid.  All likelihood quantities (negative
log likelihood, score, information) are computed against the same grid so
that first-order conditions hold exactly at the quadrature level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .basis import BasisSpec, design_matrix, validate_support
from .errors import DataError, SolverError, TargetingError

_FLAT_DENSITY = 1e-12


def default_grid_size(n: int) -> int:
    """Number of quadrature bins used for a sample of size ``n``."""
    return max(1000, 2 * int(n))


@dataclass(frozen=True)
class QuadratureGrid:
    """Partition of [0, 1] into bins evaluated at midpoints.

    ``edges`` has length ``num_bins + 1``, starts at 0 and ends at 1.
    """

    edges: np.ndarray

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2:
            raise ValueError("grid needs at least one bin")
        if edges[0] != 0.0 or edges[-1] != 1.0:
            raise ValueError("grid must span [0, 1] exactly")
        if np.any(np.diff(edges) <= 0.0):
            raise ValueError("grid edges must be strictly increasing")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def uniform(cls, num_bins: int) -> "QuadratureGrid":
        if num_bins < 1:
            raise ValueError("num_bins must be positive")
        return cls(np.linspace(0.0, 1.0, num_bins + 1))

    @cached_property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @cached_property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @cached_property
    def log_widths(self) -> np.ndarray:
        return np.log(self.widths)

    @property
    def num_bins(self) -> int:
        return self.edges.size - 1

    def refine_with(self, points: np.ndarray) -> "QuadratureGrid":
        """New grid whose edge set additionally contains ``points``.

        Used to split bins at indicator thresholds so that integrals of
        piecewise-constant integrands are exact with respect to the grid.
        """
        points = np.atleast_1d(np.asarray(points, dtype=np.float64))
        inside = points[(points > 0.0) & (points < 1.0)]
        edges = np.unique(np.concatenate([self.edges, inside]))
        return QuadratureGrid(edges)


class LogSplineProblem:
    """Precomputed design matrices for one (basis, data, grid) triple.

    Solvers evaluate the penalized objective many times; this class hoists
    the design matrices and the data column sums out of the iteration loop.
    """

    def __init__(self, spec: BasisSpec, data: np.ndarray, grid: QuadratureGrid):
        self.spec = spec
        self.data = validate_support(data)
        self.grid = grid
        self.design_data = design_matrix(spec, self.data)
        self.design_grid = design_matrix(spec, grid.midpoints)
        self.data_colsum = self.design_data.sum(axis=0)
        self.n = self.data.size
        self.num_cols = spec.num_columns

    def log_f_grid(self, beta: np.ndarray) -> np.ndarray:
        f = self.design_grid @ beta
        if not np.all(np.isfinite(f)):
            raise SolverError("diverged coefficients: non-finite log density on grid")
        return f

    def log_norm_and_masses(self, beta: np.ndarray) -> tuple[float, np.ndarray]:
        """Log normalizing constant and normalized bin masses."""
        f = self.log_f_grid(beta)
        logc = float(logsumexp(f + self.grid.log_widths))
        masses = np.exp(f + self.grid.log_widths - logc)
        return logc, masses

    def value(self, beta: np.ndarray) -> float:
        logc, _ = self.log_norm_and_masses(beta)
        return float(-(self.data_colsum @ beta) + self.n * logc)

    def value_and_grad(self, beta: np.ndarray) -> tuple[float, np.ndarray]:
        val, grad, _ = self.eval_all(beta)
        return val, grad

    def eval_all(self, beta: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        """Objective value, gradient, and normalized bin masses in one pass."""
        logc, masses = self.log_norm_and_masses(beta)
        val = float(-(self.data_colsum @ beta) + self.n * logc)
        grad = -self.data_colsum + self.n * (self.design_grid.T @ masses)
        return val, grad, masses

    def mean_phi(self, masses: np.ndarray) -> np.ndarray:
        return self.design_grid.T @ masses

    def information(self, beta: np.ndarray) -> np.ndarray:
        """Covariance of the basis under the model, via quadrature."""
        _, masses = self.log_norm_and_masses(beta)
        return self.information_from_masses(masses)

    def information_from_masses(self, masses: np.ndarray) -> np.ndarray:
        mu = self.design_grid.T @ masses
        second = (self.design_grid * masses[:, None]).T @ self.design_grid
        return second - np.outer(mu, mu)

    def information_diagonal(self, masses: np.ndarray) -> np.ndarray:
        mu = self.design_grid.T @ masses
        second = (self.design_grid**2).T @ masses
        return second - mu**2


def log_normalizer(spec: BasisSpec, beta: np.ndarray, grid: QuadratureGrid) -> float:
    """log of the normalizing constant C(beta) by midpoint quadrature."""
    f = design_matrix(spec, grid.midpoints) @ np.asarray(beta, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise SolverError("diverged coefficients: non-finite log density on grid")
    return float(logsumexp(f + grid.log_widths))


def neg_log_likelihood(
    spec: BasisSpec, beta: np.ndarray, data: np.ndarray, grid: QuadratureGrid
) -> float:
    """Negative log likelihood of ``data`` under the normalized model."""
    data = validate_support(data)
    logc = log_normalizer(spec, beta, grid)
    fvals = design_matrix(spec, data) @ np.asarray(beta, dtype=np.float64)
    return float(-fvals.sum() + data.size * logc)


def score_vectors(
    spec: BasisSpec, beta: np.ndarray, data: np.ndarray, grid: QuadratureGrid
) -> np.ndarray:
    """Per-observation scores ``phi(x_i) - E_beta[phi]``, shape (n, K)."""
    problem = LogSplineProblem(spec, data, grid)
    _, masses = problem.log_norm_and_masses(np.asarray(beta, dtype=np.float64))
    return problem.design_data - problem.mean_phi(masses)[None, :]


def information_matrix(spec: BasisSpec, beta: np.ndarray, grid: QuadratureGrid) -> np.ndarray:
    """Model-based information: Cov_beta(phi) computed by quadrature."""
    phi = design_matrix(spec, grid.midpoints)
    f = phi @ np.asarray(beta, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise SolverError("diverged coefficients: non-finite log density on grid")
    logc = logsumexp(f + grid.log_widths)
    masses = np.exp(f + grid.log_widths - logc)
    mu = phi.T @ masses
    return (phi * masses[:, None]).T @ phi - np.outer(mu, mu)


def empirical_information(
    spec: BasisSpec, beta: np.ndarray, data: np.ndarray, grid: QuadratureGrid
) -> np.ndarray:
    """Average outer product of per-observation scores, shape (K, K)."""
    scores = score_vectors(spec, beta, data, grid)
    return scores.T @ scores / scores.shape[0]


def cdf_from_masses(grid: QuadratureGrid, masses: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Piecewise-linear CDF induced by bin masses, evaluated at ``x``.

    The density is treated as constant on each bin, so the CDF is linear on
    each bin, continuous, and equals 1 exactly at the right endpoint.
    """
    x = np.asarray(x, dtype=np.float64)
    masses = masses / masses.sum()
    cum = np.concatenate([[0.0], np.cumsum(masses)])
    cum[-1] = 1.0
    idx = np.clip(np.searchsorted(grid.edges, x, side="right") - 1, 0, grid.num_bins - 1)
    frac = (x - grid.edges[idx]) / (grid.edges[idx + 1] - grid.edges[idx])
    out = cum[idx] + frac * masses[idx]
    out = np.clip(out, 0.0, 1.0)
    out[x >= 1.0] = 1.0
    return out


def quantile_from_masses(grid: QuadratureGrid, masses: np.ndarray, q: float) -> float:
    """Invert the piecewise-linear quadrature CDF at probability ``q``.

    Solves ``F(x) = q`` exactly within the bin that brackets ``q``.  Raises
    if the bracketing bin carries (numerically) zero density, in which case
    the quantile is not identified.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("quantile level must be strictly inside (0, 1)")
    masses = masses / masses.sum()
    cum = np.concatenate([[0.0], np.cumsum(masses)])
    cum[-1] = 1.0
    g = int(np.searchsorted(cum, q, side="left"))
    g = min(max(g - 1, 0), grid.num_bins - 1)
    width = grid.edges[g + 1] - grid.edges[g]
    dens = masses[g] / width
    if dens < _FLAT_DENSITY:
        raise TargetingError("flat CDF at quantile: density vanishes near the target level")
    return float(grid.edges[g] + (q - cum[g]) / masses[g] * width)


@dataclass(frozen=True)
class FittedDensity:
    """A normalized log-spline density estimate.

    Carries everything needed to evaluate the density, its CDF, and model
    quantities: the basis, coefficients, quadrature grid, cached log
    normalizer, and the penalty level the coefficients were fit at.
    """

    spec: BasisSpec
    beta: np.ndarray
    grid: QuadratureGrid
    log_norm: float
    penalty: float = 0.0
    converged: bool = True
    trace: object | None = None

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.spec.num_columns,):
            raise ValueError(
                f"beta has {beta.size} entries but the basis has {self.spec.num_columns} columns"
            )
        object.__setattr__(self, "beta", beta)

    @cached_property
    def grid_masses(self) -> np.ndarray:
        f = design_matrix(self.spec, self.grid.midpoints) @ self.beta
        return np.exp(f + self.grid.log_widths - self.log_norm)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        return design_matrix(self.spec, x) @ self.beta - self.log_norm

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(x))

    def cdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        return cdf_from_masses(self.grid, self.grid_masses, x)

    def quantile(self, q: float) -> float:
        return quantile_from_masses(self.grid, self.grid_masses, q)

    @property
    def active_set(self) -> np.ndarray:
        """Indices of coefficients with magnitude above 1e-8."""
        return np.flatnonzero(np.abs(self.beta) > 1e-8)

    def l1_norm(self) -> float:
        return float(np.abs(self.beta).sum())


def fitted_density(spec: BasisSpec, beta: np.ndarray, grid: QuadratureGrid, penalty: float = 0.0,
                   converged: bool = True, trace: object | None = None) -> FittedDensity:
    """Construct a :class:`FittedDensity`, computing the log normalizer."""
    beta = np.asarray(beta, dtype=np.float64)
    return FittedDensity(
        spec=spec,
        beta=beta,
        grid=grid,
        log_norm=log_normalizer(spec, beta, grid),
        penalty=penalty,
        converged=converged,
        trace=trace,
    )


def model_to_dict(fit: FittedDensity) -> dict:
    """JSON-ready representation of a fitted model.

    Only models with the parametric block and a uniform grid are
    serializable; those are the only kinds solvers produce.
    """
    if not fit.spec.include_parametric:
        raise ValueError("only models with the parametric block serialize")
    widths = fit.grid.widths
    if not np.allclose(widths, widths[0], rtol=0.0, atol=1e-15):
        raise ValueError("only uniform quadrature grids serialize")
    return {
        "order": int(fit.spec.order),
        "knots": [float(u) for u in fit.spec.knots],
        "beta": [float(b) for b in fit.beta],
        "grid": {"G": int(fit.grid.num_bins)},
        "logC": float(fit.log_norm),
        "penalty": float(fit.penalty),
    }


def model_from_dict(payload: dict) -> FittedDensity:
    spec = BasisSpec(order=int(payload["order"]), knots=np.asarray(payload["knots"], dtype=np.float64))
    return FittedDensity(
        spec=spec,
        beta=np.asarray(payload["beta"], dtype=np.float64),
        grid=QuadratureGrid.uniform(int(payload["grid"]["G"])),
        log_norm=float(payload["logC"]),
        penalty=float(payload.get("penalty", 0.0)),
    )


def save_model(fit: FittedDensity, path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(model_to_dict(fit), handle, indent=2)
        handle.write("\n")


def load_model(path: str) -> FittedDensity:
    with open(path, encoding="utf-8") as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise DataError(f"no data: could not parse model file {path}: {exc}") from exc
    return model_from_dict(payload)
