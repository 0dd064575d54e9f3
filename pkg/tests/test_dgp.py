"""Simulation distributions: densities, CDFs, sampling, population values."""

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import kstest

from tvdensity.dgp import (
    DGP_ORDER,
    DGPS,
    dgp_index,
    get_dgp,
    population_truth,
    sample,
    true_cdf,
    true_density,
    true_moment,
    true_quantile,
)
from tvdensity.errors import SupportError


def test_registry():
    assert len(DGP_ORDER) == 6
    assert DGP_ORDER[0] == "truncated_normal"
    assert dgp_index("step") == DGP_ORDER.index("step")
    with pytest.raises(ValueError):
        get_dgp("cauchy")


@pytest.mark.parametrize("name", DGP_ORDER)
def test_density_normalizes(name):
    spec = get_dgp(name)
    xs = np.linspace(0.0, 1.0, 2001)
    dens = true_density(spec, xs)
    assert np.all(dens >= 0.0)
    total, _ = integrate.quad(lambda t: float(true_density(spec, t)[0]), 0.0, 1.0,
                              limit=400)
    assert total == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("name", DGP_ORDER)
def test_cdf_shape(name):
    spec = get_dgp(name)
    xs = np.linspace(0.0, 1.0, 501)
    cdf = true_cdf(spec, xs)
    assert cdf[0] == pytest.approx(0.0, abs=1e-12)
    assert cdf[-1] == pytest.approx(1.0, abs=1e-9)
    assert np.all(np.diff(cdf) >= -1e-15)


@pytest.mark.parametrize("name", DGP_ORDER)
def test_quantile_inverts_cdf(name):
    spec = get_dgp(name)
    for q in (0.1, 0.5, 0.9):
        x = true_quantile(spec, q)
        assert float(true_cdf(spec, np.array([x]))[0]) == pytest.approx(q, abs=1e-9)
    with pytest.raises(ValueError):
        true_quantile(spec, 0.0)


def test_support_check():
    with pytest.raises(SupportError):
        true_density(get_dgp("step"), np.array([-0.1]))
    with pytest.raises(SupportError):
        true_cdf(get_dgp("step"), np.array([1.4]))


@pytest.mark.parametrize("name", DGP_ORDER)
def test_sampling_deterministic_and_in_support(name):
    spec = get_dgp(name)
    a = sample(spec, 500, seed=77)
    b = sample(spec, 500, seed=77)
    np.testing.assert_array_equal(a, b)
    c = sample(spec, 500, seed=78)
    assert not np.array_equal(a, c)
    assert a.min() >= 0.0 and a.max() <= 1.0
    with pytest.raises(ValueError):
        sample(spec, 0, seed=1)


@pytest.mark.parametrize("name", DGP_ORDER)
def test_sampling_matches_cdf(name):
    spec = get_dgp(name)
    draws = sample(spec, 20000, seed=101)
    stat = kstest(draws, lambda x: true_cdf(spec, x)).statistic
    assert stat < 0.015


@pytest.mark.parametrize("name", DGP_ORDER)
def test_population_truth_consistent(name):
    spec = get_dgp(name)
    truth = population_truth(spec)
    mean_q, _ = integrate.quad(lambda t: t * float(true_density(spec, t)[0]),
                               0.0, 1.0, limit=400)
    m2_q, _ = integrate.quad(lambda t: t * t * float(true_density(spec, t)[0]),
                             0.0, 1.0, limit=400)
    assert truth.mean == pytest.approx(mean_q, abs=1e-8)
    assert truth.second_moment == pytest.approx(m2_q, abs=1e-8)
    assert truth.variance == pytest.approx(m2_q - mean_q**2, abs=1e-8)
    assert float(true_cdf(spec, np.array([truth.median]))[0]) == pytest.approx(0.5, abs=1e-9)
    assert truth.survival_at_half == pytest.approx(
        1.0 - float(true_cdf(spec, np.array([0.5]))[0]), abs=1e-12)


def test_symmetric_entries_are_exact():
    for name in ("truncated_normal", "sinusoidal", "gmm_sym3", "gmm_spikes5"):
        truth = population_truth(get_dgp(name))
        assert truth.mean == 0.5
        assert truth.median == 0.5
        assert truth.survival_at_half == 0.5


def test_step_closed_forms():
    truth = population_truth(get_dgp("step"))
    # levels 1.0 / 0.5 with the break at 0.7 give mass 14/17 below the break
    assert truth.survival_at_half == pytest.approx(7.0 / 17.0, abs=1e-12)
    assert truth.mean == pytest.approx((0.5 * 0.49 + 0.25 * 0.51) / 0.85, abs=1e-12)
    spec = get_dgp("step")
    assert float(true_density(spec, np.array([0.69]))[0]) == pytest.approx(1.0 / 0.85)
    assert float(true_density(spec, np.array([0.71]))[0]) == pytest.approx(0.5 / 0.85)


def test_higher_moment_quadrature():
    spec = get_dgp("gmm_asym3")
    m3 = true_moment(spec, 3)
    ref, _ = integrate.quad(lambda t: t**3 * float(true_density(spec, t)[0]),
                            0.0, 1.0, limit=400)
    assert m3 == pytest.approx(ref, abs=1e-10)
    assert true_moment(spec, 1) == population_truth(spec).mean
