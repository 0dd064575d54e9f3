"""Plug-in and targeted (TMLE) estimation of smooth functionals.

Targets are moments, survival/CDF at a point, and quantiles.  Targeting
fluctuates the log density additively, ``f -> f + eps * h`` with ``h`` the
efficient influence curve direction, renormalizing through the quadrature
constant.  The fluctuation terms live outside the spline span, so the
tilted density keeps the base fit plus a list of ``(eps, h)`` terms, with
the quadrature grid split at every indicator threshold so the integrals of
piecewise-constant directions are exact at the grid level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .basis import design_matrix, validate_support
from .errors import DataError, TargetingError
from .model import FittedDensity, QuadratureGrid, cdf_from_masses, quantile_from_masses

_FLAT_DENSITY = 1e-12
Z_95 = 1.959963984540054


@dataclass(frozen=True)
class EstimandSpec:
    """One of four estimand kinds: moment, survival, cdf, quantile."""

    kind: str
    moment_order: int = 1
    x0: float = 0.5
    q: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("moment", "survival", "cdf", "quantile"):
            raise ValueError(f"unknown estimand kind {self.kind!r}")
        if self.kind == "moment" and self.moment_order < 1:
            raise ValueError("moment order must be >= 1")
        if self.kind in ("survival", "cdf") and not 0.0 < self.x0 < 1.0:
            raise ValueError("threshold x0 must be inside (0, 1)")
        if self.kind == "quantile" and not 0.0 < self.q < 1.0:
            raise ValueError("quantile level must be inside (0, 1)")

    @classmethod
    def moment(cls, order: int) -> "EstimandSpec":
        return cls(kind="moment", moment_order=order)

    @classmethod
    def survival(cls, x0: float) -> "EstimandSpec":
        return cls(kind="survival", x0=x0)

    @classmethod
    def cdf(cls, x0: float) -> "EstimandSpec":
        return cls(kind="cdf", x0=x0)

    @classmethod
    def quantile(cls, q: float) -> "EstimandSpec":
        return cls(kind="quantile", q=q)

    def params(self) -> dict:
        if self.kind == "moment":
            return {"order": self.moment_order}
        if self.kind in ("survival", "cdf"):
            return {"x0": self.x0}
        return {"q": self.q}

    def label(self) -> str:
        if self.kind == "moment":
            return "mean" if self.moment_order == 1 else f"moment:{self.moment_order}"
        if self.kind in ("survival", "cdf"):
            return f"{self.kind}:{self.x0:g}"
        return "median" if self.q == 0.5 else f"quantile:{self.q:g}"


def parse_estimand(text: str) -> EstimandSpec:
    """Parse CLI-style estimand strings like mean, moment:2, survival:0.5."""
    token = text.strip().lower()
    if token == "mean":
        return EstimandSpec.moment(1)
    if token == "median":
        return EstimandSpec.quantile(0.5)
    if ":" in token:
        kind, _, arg = token.partition(":")
        if kind == "moment":
            return EstimandSpec.moment(int(arg))
        if kind == "survival":
            return EstimandSpec.survival(float(arg))
        if kind == "cdf":
            return EstimandSpec.cdf(float(arg))
        if kind == "quantile":
            return EstimandSpec.quantile(float(arg))
    raise ValueError(
        f"cannot parse estimand {text!r}; expected mean, median, moment:M, "
        "survival:X, cdf:X, or quantile:Q"
    )


@dataclass(frozen=True)
class TiltTerm:
    """One fluctuation term: coefficient, direction, and its discontinuities."""

    eps: float
    fn: Callable[[np.ndarray], np.ndarray]
    breaks: tuple[float, ...] = ()


@dataclass(frozen=True)
class TiltedDensity:
    """Base log-spline fit tilted by additive fluctuation terms.

    The evaluation grid is the base grid split at every term discontinuity
    (plus any requested extra breaks), so indicator directions are constant
    within each bin.
    """

    base: FittedDensity
    terms: tuple[TiltTerm, ...] = ()
    extra_breaks: tuple[float, ...] = ()

    @cached_property
    def grid(self) -> QuadratureGrid:
        breaks = list(self.extra_breaks)
        for term in self.terms:
            breaks.extend(term.breaks)
        if not breaks:
            return self.base.grid
        return self.base.grid.refine_with(np.asarray(breaks))

    def log_unnormalized(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        out = design_matrix(self.base.spec, x) @ self.base.beta
        for term in self.terms:
            out = out + term.eps * term.fn(x)
        return out

    @cached_property
    def _grid_state(self) -> tuple[np.ndarray, float]:
        logf = self.log_unnormalized(self.grid.midpoints)
        log_norm = float(logsumexp(logf + self.grid.log_widths))
        return logf, log_norm

    @property
    def log_norm(self) -> float:
        return self._grid_state[1]

    @cached_property
    def grid_masses(self) -> np.ndarray:
        logf, log_norm = self._grid_state
        return np.exp(logf + self.grid.log_widths - log_norm)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        return self.log_unnormalized(x) - self.log_norm

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(x))

    def cdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        return cdf_from_masses(self.grid, self.grid_masses, x)

    def quantile(self, q: float) -> float:
        return quantile_from_masses(self.grid, self.grid_masses, q)


def _spec_breaks(spec: EstimandSpec) -> tuple[float, ...]:
    if spec.kind in ("survival", "cdf"):
        return (spec.x0,)
    return ()


def as_tilted(fit: FittedDensity | TiltedDensity, spec: EstimandSpec) -> TiltedDensity:
    """View any fit as a tilted density whose grid is split for ``spec``."""
    breaks = _spec_breaks(spec)
    if isinstance(fit, TiltedDensity):
        if all(b in fit.extra_breaks for b in breaks):
            return fit
        merged = tuple(sorted(set(fit.extra_breaks) | set(breaks)))
        return TiltedDensity(fit.base, fit.terms, merged)
    return TiltedDensity(fit, (), breaks)


def plugin_estimate(fit: FittedDensity | TiltedDensity, spec: EstimandSpec) -> float:
    """Quadrature plug-in value of the estimand under the fit."""
    view = as_tilted(fit, spec)
    masses = view.grid_masses
    mids = view.grid.midpoints
    if spec.kind == "moment":
        return float((mids**spec.moment_order) @ masses)
    if spec.kind == "survival":
        return float(masses[mids > spec.x0].sum())
    if spec.kind == "cdf":
        return 1.0 - float(masses[mids > spec.x0].sum())
    return view.quantile(spec.q)


def _direction(
    view: TiltedDensity, spec: EstimandSpec
) -> tuple[Callable[[np.ndarray], np.ndarray], tuple[float, ...]]:
    """Fluctuation direction h for one targeting step under the current fit."""
    if spec.kind == "moment":
        m = spec.moment_order
        return (lambda x: np.asarray(x, dtype=np.float64) ** m), ()
    if spec.kind == "survival":
        x0 = spec.x0
        return (lambda x: (np.asarray(x, dtype=np.float64) > x0).astype(np.float64)), (x0,)
    if spec.kind == "cdf":
        x0 = spec.x0
        return (lambda x: (np.asarray(x, dtype=np.float64) <= x0).astype(np.float64)), (x0,)
    qhat = view.quantile(spec.q)
    return (lambda x: (np.asarray(x, dtype=np.float64) < qhat).astype(np.float64)), (qhat,)


def eic(
    fit: FittedDensity | TiltedDensity, spec: EstimandSpec, x: np.ndarray
) -> np.ndarray:
    """Efficient influence curve of the estimand at ``x`` under ``fit``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    view = as_tilted(fit, spec)
    if spec.kind == "moment":
        psi = plugin_estimate(view, spec)
        return x**spec.moment_order - psi
    if spec.kind == "survival":
        psi = plugin_estimate(view, spec)
        return (x > spec.x0).astype(np.float64) - psi
    if spec.kind == "cdf":
        psi = plugin_estimate(view, spec)
        return (x <= spec.x0).astype(np.float64) - psi
    qhat = view.quantile(spec.q)
    dens = float(view.pdf(np.array([qhat]))[0])
    if dens < _FLAT_DENSITY:
        raise TargetingError("flat CDF at quantile: density vanishes at the fitted quantile")
    return (spec.q - (x < qhat).astype(np.float64)) / dens


@dataclass(frozen=True)
class TargetingConfig:
    max_steps: int = 10
    eps_max: float = 10.0
    min_steps: int = 1

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.eps_max <= 0.0:
            raise ValueError("eps_max must be positive")
        if not 0 <= self.min_steps <= self.max_steps:
            raise ValueError("min_steps must be in [0, max_steps]")


@dataclass(frozen=True)
class EstimandReport:
    """Plug-in and targeted values with EIC-based uncertainty."""

    spec: EstimandSpec
    n: int
    plugin_value: float
    tmle_value: float
    eic_values: np.ndarray
    se: float
    ci95: tuple[float, float]
    steps: tuple[tuple[float, float], ...]
    final_score: float
    stop_threshold: float
    converged: bool
    tilted: TiltedDensity = field(repr=False)


def eic_confidence_interval(report: EstimandReport) -> tuple[float, float]:
    """95% z-interval from the post-targeting influence values."""
    if report.n < 2:
        raise DataError("no data: interval needs at least two observations")
    return report.ci95


def _solve_epsilon(
    logf0: np.ndarray,
    log_w: np.ndarray,
    h_grid: np.ndarray,
    h_data_sum: float,
    n: int,
    eps_max: float,
) -> float:
    """Root of the path score: d/deps of the empirical NLL along f + eps*h.

    The derivative is ``-sum_i h(x_i) + n * E_eps[h]``, increasing in eps, so
    a sign change over [-eps_max, eps_max] is required and then brentq plus a
    couple of Newton polish steps drive the score to machine precision.
    """

    def path_score(eps: float) -> float:
        logp = logf0 + eps * h_grid + log_w
        logp = logp - logsumexp(logp)
        return -h_data_sum + n * float(np.exp(logp) @ h_grid)

    lo, hi = -eps_max, eps_max
    f_lo, f_hi = path_score(lo), path_score(hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if f_lo * f_hi > 0.0:
        raise TargetingError(
            "failed to bracket fluctuation step: path score has no sign change "
            f"on [{-eps_max:g}, {eps_max:g}]"
        )
    eps = float(brentq(path_score, lo, hi, xtol=1e-13, rtol=8.9e-16, maxiter=200))
    for _ in range(2):
        logp = logf0 + eps * h_grid + log_w
        logp = logp - logsumexp(logp)
        weights = np.exp(logp)
        mean_h = float(weights @ h_grid)
        var_h = float(weights @ (h_grid - mean_h) ** 2)
        if var_h <= 0.0:
            break
        eps -= (-h_data_sum + n * mean_h) / (n * var_h)
    return eps


def tmle_target(
    fit: FittedDensity,
    spec: EstimandSpec,
    data: np.ndarray,
    config: TargetingConfig | None = None,
) -> EstimandReport:
    """Iterative TMLE: fluctuate along the EIC direction until the score rule.

    Each step solves the one-dimensional MLE along ``f + eps * h`` exactly,
    so the empirical NLL never increases.  Stops when
    ``|P_n D*| <= sigma_0 / (sqrt(n) log n)`` with ``sigma_0`` the influence
    sd at the initial fit, or after ``max_steps``.
    """
    if config is None:
        config = TargetingConfig()
    data = validate_support(data)
    n = data.size
    if n < 2:
        raise DataError("no data: targeting needs at least two observations")
    current = as_tilted(fit, spec)
    plugin0 = plugin_estimate(current, spec)
    scores = eic(current, spec, data)
    sigma0 = float(np.std(scores, ddof=1))
    threshold = max(sigma0 / (math.sqrt(n) * math.log(n)), 1e-12)
    steps: list[tuple[float, float]] = []
    converged = False
    for step_index in range(config.max_steps):
        pn_score = float(scores.mean())
        # the first step is a pure likelihood ascent along the path, and for
        # moment and survival estimands it solves the score equation exactly,
        # so it is taken even when the initial score is under the threshold
        if abs(pn_score) <= threshold and step_index >= config.min_steps:
            converged = True
            break
        h_fn, h_breaks = _direction(current, spec)
        candidate = TiltedDensity(
            current.base,
            current.terms + (TiltTerm(0.0, h_fn, h_breaks),),
            current.extra_breaks,
        )
        grid = candidate.grid
        logf0_vals = current.log_unnormalized(grid.midpoints)
        h_grid = h_fn(grid.midpoints)
        eps = _solve_epsilon(
            logf0_vals, grid.log_widths, h_grid, float(h_fn(data).sum()), n, config.eps_max
        )
        current = TiltedDensity(
            current.base,
            current.terms + (TiltTerm(eps, h_fn, h_breaks),),
            current.extra_breaks,
        )
        scores = eic(current, spec, data)
        steps.append((eps, float(scores.mean())))
        converged = abs(float(scores.mean())) <= threshold
    tmle_value = plugin_estimate(current, spec)
    se = float(np.std(scores, ddof=1)) / math.sqrt(n)
    final_score = float(scores.mean())
    return EstimandReport(
        spec=spec,
        n=n,
        plugin_value=plugin0,
        tmle_value=tmle_value,
        eic_values=scores,
        se=se,
        ci95=(tmle_value - Z_95 * se, tmle_value + Z_95 * se),
        steps=tuple(steps),
        final_score=final_score,
        stop_threshold=threshold,
        converged=converged,
        tilted=current,
    )


def report_to_dict(report: EstimandReport) -> dict:
    """JSON-ready summary of a targeting run."""
    return {
        "kind": report.spec.kind,
        "params": report.spec.params(),
        "plugin": report.plugin_value,
        "tmle": report.tmle_value,
        "se": report.se,
        "ci": [report.ci95[0], report.ci95[1]],
        "steps": [{"eps": eps, "pn_score": score} for eps, score in report.steps],
        "final_score": report.final_score,
        "converged": report.converged,
    }
