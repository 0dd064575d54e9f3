"""Truncated power basis on the unit interval.

The basis of degree ``k`` consists of the parametric block ``1, x, ..., x^k``
followed by one truncated power function ``(x - u)_+^k`` per knot ``u``, with
knots in ascending order.  For ``k = 0`` the truncated power is the
right-closed indicator ``1{u <= x}``, so every basis function is cadlag and
nondecreasing on ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, SupportError

SUPPORTED_ORDERS = (0, 1, 2)


def validate_support(x: np.ndarray, what: str = "data") -> np.ndarray:
    """Return ``x`` as a float64 array after checking it lies in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DataError(f"no data: {what} is empty")
    if not np.all(np.isfinite(x)):
        raise SupportError(f"out of support: {what} contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise SupportError(f"out of support: {what} must lie in [0, 1]")
    return x


@dataclass(frozen=True)
class BasisSpec:
    """Degree and knot locations of a truncated power basis.

    Attributes
    ----------
    order : int
        Polynomial degree ``k``, one of 0, 1, 2.
    knots : np.ndarray
        Strictly increasing knot locations inside ``[0, 1]``.
    include_parametric : bool
        Whether the ``1, x, ..., x^k`` block is prepended.
    """

    order: int
    knots: np.ndarray
    include_parametric: bool = True

    def __post_init__(self) -> None:
        if self.order not in SUPPORTED_ORDERS:
            raise ValueError(f"order must be one of {SUPPORTED_ORDERS}, got {self.order}")
        knots = np.asarray(self.knots, dtype=np.float64)
        if knots.ndim != 1 or knots.size == 0:
            raise DataError("no data: knot set is empty")
        if not np.all(np.isfinite(knots)):
            raise SupportError("out of support: knots contain non-finite values")
        if knots.min() < 0.0 or knots.max() > 1.0:
            raise SupportError("out of support: knots must lie in [0, 1]")
        if np.any(np.diff(knots) <= 0.0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "knots", knots)

    @property
    def num_parametric(self) -> int:
        return self.order + 1 if self.include_parametric else 0

    @property
    def num_columns(self) -> int:
        return self.num_parametric + self.knots.size


def make_knots(data: np.ndarray, max_knots: int | None = None) -> np.ndarray:
    """Knot locations from data: sorted distinct values, optionally capped.

    When ``max_knots`` is given and there are more distinct values than that,
    the knots are thinned to ``max_knots`` evenly spaced quantiles of the
    distinct values (always keeping the smallest and largest).
    """
    data = validate_support(data)
    knots = np.unique(data)
    if max_knots is not None:
        if max_knots < 1:
            raise ValueError("max_knots must be positive")
        if knots.size > max_knots:
            idx = np.round(np.linspace(0, knots.size - 1, max_knots)).astype(int)
            knots = knots[np.unique(idx)]
    return knots


def make_basis_spec(
    data: np.ndarray,
    order: int,
    max_knots: int | None = None,
    include_parametric: bool = True,
) -> BasisSpec:
    """Build a :class:`BasisSpec` with knots taken from the data."""
    return BasisSpec(order=order, knots=make_knots(data, max_knots), include_parametric=include_parametric)


def design_matrix(spec: BasisSpec, x: np.ndarray) -> np.ndarray:
    """Evaluate every basis function at every point of ``x``.

    Returns an array of shape ``(len(x), spec.num_columns)`` with the
    parametric block first (ascending powers, ``x^0 = 1`` everywhere) and one
    column per knot in ascending knot order.
    """
    x = validate_support(x, what="evaluation points")
    k = spec.order
    cols = []
    if spec.include_parametric:
        # x^0 is identically one, including at x = 0.
        cols.append(np.power.outer(x, np.arange(k + 1)))
    diff = x[:, None] - spec.knots[None, :]
    if k == 0:
        knot_block = (diff >= 0.0).astype(np.float64)
    else:
        knot_block = np.where(diff > 0.0, diff, 0.0) ** k
    cols.append(knot_block)
    return np.ascontiguousarray(np.hstack(cols))
