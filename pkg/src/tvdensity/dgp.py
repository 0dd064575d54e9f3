"""Six simulation data-generating processes on [0, 1].

Each DGP has exact density and CDF evaluation, inverse-CDF (or
mixture-component) sampling, and closed-form population parameters.
Truncated-normal components are individually renormalized to [0, 1]:
``f_c(x) = phi((x - mu)/sigma) / (sigma * (Phi((1-mu)/sigma) - Phi(-mu/sigma)))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.optimize import brentq
from scipy.stats import truncnorm

from .errors import SupportError

_SINE_C = 2.0 / np.pi + 1.1


@dataclass(frozen=True)
class TruncatedComponent:
    """One truncated-normal mixture component, renormalized to [0, 1]."""

    mu: float
    sigma: float
    weight: float

    def __post_init__(self) -> None:
        if self.sigma <= 0.0:
            raise ValueError("component sigma must be positive")
        if self.weight <= 0.0:
            raise ValueError("component weight must be positive")

    def frozen(self):
        a = (0.0 - self.mu) / self.sigma
        b = (1.0 - self.mu) / self.sigma
        return truncnorm(a, b, loc=self.mu, scale=self.sigma)


@dataclass(frozen=True)
class DgpSpec:
    """Named data-generating process.

    ``kind`` is one of truncated_normal, sinusoidal, gmm_sym3, gmm_spikes5,
    gmm_asym3, step.  Mixture kinds carry ``components``; the step carries
    ``levels`` and ``breakpoint``.
    """

    kind: str
    components: tuple[TruncatedComponent, ...] = ()
    levels: tuple[float, float] = (1.0, 0.5)
    breakpoint: float = 0.7
    symmetric: bool = False

    def __post_init__(self) -> None:
        if self.components:
            total = sum(c.weight for c in self.components)
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"mixture weights sum to {total}, not 1")
        if self.kind == "step":
            if min(self.levels) <= 0.0:
                raise ValueError("step levels must be positive")
            if not 0.0 < self.breakpoint < 1.0:
                raise ValueError("step breakpoint must be inside (0, 1)")


def _mixture(kind: str, params: list[tuple[float, float, float]], symmetric: bool) -> DgpSpec:
    comps = tuple(TruncatedComponent(mu, sigma, w) for mu, sigma, w in params)
    return DgpSpec(kind=kind, components=comps, symmetric=symmetric)


DGPS: dict[str, DgpSpec] = {
    "truncated_normal": _mixture("truncated_normal", [(0.5, 0.1, 1.0)], symmetric=True),
    "sinusoidal": DgpSpec(kind="sinusoidal", symmetric=True),
    "gmm_sym3": _mixture(
        "gmm_sym3",
        [(0.2, 0.05, 0.33), (0.5, 0.05, 0.34), (0.8, 0.05, 0.33)],
        symmetric=True,
    ),
    "gmm_spikes5": _mixture(
        "gmm_spikes5",
        [(0.45, 0.005, 1 / 15), (0.475, 0.005, 1 / 15), (0.5, 0.005, 1 / 15),
         (0.525, 0.005, 1 / 15), (0.55, 0.005, 1 / 15), (0.5, 0.05, 2 / 3)],
        symmetric=True,
    ),
    "gmm_asym3": _mixture(
        "gmm_asym3",
        [(0.35, 0.1, 0.4), (0.65, 0.05, 0.4), (0.9, 0.2, 0.2)],
        symmetric=False,
    ),
    "step": DgpSpec(kind="step", levels=(1.0, 0.5), breakpoint=0.7, symmetric=False),
}

DGP_ORDER = tuple(DGPS)


def get_dgp(name: str) -> DgpSpec:
    try:
        return DGPS[name]
    except KeyError:
        raise ValueError(f"unknown dgp name {name!r}; choose from {sorted(DGPS)}") from None


def dgp_index(name: str) -> int:
    """Stable index of a DGP in the canonical ordering, for seed substreams."""
    return DGP_ORDER.index(name)


@dataclass(frozen=True)
class PopulationTruth:
    mean: float
    median: float
    variance: float
    second_moment: float
    survival_at_half: float

    def __post_init__(self) -> None:
        gap = abs(self.variance - (self.second_moment - self.mean**2))
        if gap > 1e-9:
            raise ValueError(f"variance and moments disagree by {gap:.2e}")


def _check_support(x: np.ndarray) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise SupportError("out of support: evaluation points must lie in [0, 1]")
    return x


def _step_norm(spec: DgpSpec) -> float:
    l1, l2 = spec.levels
    return l1 * spec.breakpoint + l2 * (1.0 - spec.breakpoint)


def true_density(spec: DgpSpec, x: np.ndarray) -> np.ndarray:
    """Exact normalized density of the DGP at ``x`` (vectorized)."""
    x = _check_support(x)
    if spec.components:
        out = np.zeros_like(x)
        for comp in spec.components:
            out += comp.weight * comp.frozen().pdf(x)
        return out
    if spec.kind == "sinusoidal":
        return (np.sin(np.pi * x) + 1.1) / _SINE_C
    if spec.kind == "step":
        l1, l2 = spec.levels
        return np.where(x < spec.breakpoint, l1, l2) / _step_norm(spec)
    raise ValueError(f"unknown dgp kind {spec.kind!r}")


def true_cdf(spec: DgpSpec, x: np.ndarray) -> np.ndarray:
    """Exact CDF of the DGP at ``x`` (vectorized)."""
    x = _check_support(x)
    if spec.components:
        out = np.zeros_like(x)
        for comp in spec.components:
            out += comp.weight * comp.frozen().cdf(x)
        return out
    if spec.kind == "sinusoidal":
        return ((1.0 - np.cos(np.pi * x)) / np.pi + 1.1 * x) / _SINE_C
    if spec.kind == "step":
        l1, l2 = spec.levels
        b = spec.breakpoint
        below = l1 * np.minimum(x, b)
        above = l2 * np.maximum(x - b, 0.0)
        return (below + above) / _step_norm(spec)
    raise ValueError(f"unknown dgp kind {spec.kind!r}")


def true_quantile(spec: DgpSpec, q: float) -> float:
    """Exact quantile by root finding on the CDF."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile level must be inside (0, 1)")
    return float(brentq(lambda t: true_cdf(spec, t)[0] - q, 0.0, 1.0, xtol=1e-14))


@lru_cache(maxsize=4)
def _sine_table(size: int = 200_001) -> tuple[np.ndarray, np.ndarray]:
    xs = np.linspace(0.0, 1.0, size)
    return true_cdf(DGPS["sinusoidal"], xs), xs


def sample(spec: DgpSpec, n: int, seed) -> np.ndarray:
    """Draw ``n`` i.i.d. points, deterministically per seed.

    Mixtures use component selection plus truncated-normal inverse sampling;
    the sinusoidal density uses inverse-CDF on a fine tabulated CDF; the step
    inverts its piecewise-linear CDF in closed form.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    if spec.components:
        weights = np.array([c.weight for c in spec.components])
        comp_idx = rng.choice(len(spec.components), size=n, p=weights)
        u = rng.random(n)
        out = np.empty(n)
        for i, comp in enumerate(spec.components):
            mask = comp_idx == i
            if mask.any():
                out[mask] = comp.frozen().ppf(u[mask])
        return np.clip(out, 0.0, 1.0)
    u = rng.random(n)
    if spec.kind == "sinusoidal":
        cdf_tab, x_tab = _sine_table()
        return np.interp(u, cdf_tab, x_tab)
    if spec.kind == "step":
        l1, l2 = spec.levels
        b = spec.breakpoint
        c = _step_norm(spec)
        cut = l1 * b / c
        return np.where(u < cut, u * c / l1, b + (u * c - l1 * b) / l2)
    raise ValueError(f"unknown dgp kind {spec.kind!r}")


def _truncnorm_m1_m2(comp: TruncatedComponent) -> tuple[float, float]:
    mean, var = comp.frozen().stats(moments="mv")
    return float(mean), float(var + mean**2)


def population_truth(spec: DgpSpec) -> PopulationTruth:
    """Closed-form population parameters; symmetric DGPs get exact 0.5 entries."""
    if spec.components:
        m1 = sum(c.weight * _truncnorm_m1_m2(c)[0] for c in spec.components)
        m2 = sum(c.weight * _truncnorm_m1_m2(c)[1] for c in spec.components)
    elif spec.kind == "sinusoidal":
        m1 = 0.5
        m2 = ((np.pi**2 - 4.0) / np.pi**3 + 1.1 / 3.0) / _SINE_C
    elif spec.kind == "step":
        l1, l2 = spec.levels
        b = spec.breakpoint
        c = _step_norm(spec)
        m1 = (l1 * b**2 / 2.0 + l2 * (1.0 - b**2) / 2.0) / c
        m2 = (l1 * b**3 / 3.0 + l2 * (1.0 - b**3) / 3.0) / c
    else:
        raise ValueError(f"unknown dgp kind {spec.kind!r}")
    if spec.symmetric:
        mean, median, surv = 0.5, 0.5, 0.5
        m1 = 0.5
    else:
        mean = m1
        median = true_quantile(spec, 0.5)
        surv = 1.0 - float(true_cdf(spec, 0.5)[0])
    return PopulationTruth(
        mean=float(mean),
        median=float(median),
        variance=float(m2 - m1**2),
        second_moment=float(m2),
        survival_at_half=float(surv),
    )


def true_moment(spec: DgpSpec, order: int) -> float:
    """Population moment E[X^order], closed form for 1 and 2, quadrature above."""
    truth = population_truth(spec)
    if order == 1:
        return truth.mean
    if order == 2:
        return truth.second_moment
    val, _ = integrate.quad(lambda t: t**order * true_density(spec, t)[0], 0.0, 1.0, limit=200)
    return float(val)
