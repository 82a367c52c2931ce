from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import ndtri

from gdist.bsde import simulate_paths
from gdist.distkit import Dirac, Lognormal, Normal, TwoPoint, hl_integral
from gdist.drivers import LinearDriver, MarketParams, SublinearDriver, TimeGrid, density_law
from gdist.efficiency import (APPROACHED, ATTAINED, ConstantPayoff, DensityPayoff, EfficiencyResult,
                              GaussianPayoff, g_expectation_linear, g_expectation_sublinear,
                              minimizing_sequence_payoff, two_rate_bounds, two_rate_sufficient_lower,
                              two_rate_sufficient_upper)
from gdist.errors import AtomDetected, InvalidParameters

import oracles


def _scalar_market(r=0.02, R=0.05, sigma=1.0, theta=-0.1, steps=10):
    return MarketParams(TimeGrid(1.0, steps), 1, r, R, [[sigma]], [r + sigma * theta])


def test_linear_value_matches_lognormal_closed_form():
    r, theta, m, sd = 0.03, 0.25, 1.0, 0.5
    d = LinearDriver(TimeGrid(1.0, 5), 1, r, theta)
    res = g_expectation_linear(d, Normal(m, sd))
    a = -(r + 0.5 * theta**2)
    assert res.attained == ATTAINED
    assert res.value == pytest.approx(oracles.lognormal_anti_expectation(a, theta, m, sd), rel=1e-11)
    assert isinstance(res.efficient_payoff, DensityPayoff)


def test_linear_value_subtracts_discounted_delta():
    d0 = LinearDriver(TimeGrid(1.0, 5), 1, 0.03, 0.25)
    d1 = LinearDriver(TimeGrid(1.0, 5), 1, 0.03, 0.25, 0.2)
    mu = Lognormal(0.0, 0.3)
    gap = g_expectation_linear(d0, mu).value - g_expectation_linear(d1, mu).value
    assert gap == pytest.approx(0.2 * (1 - math.exp(-0.03)) / 0.03, rel=1e-12)


def test_linear_with_deterministic_density():
    d = LinearDriver(TimeGrid(1.0, 2), 1, 0.05, 0.0)
    res = g_expectation_linear(d, Dirac(2.0))
    assert res.value == pytest.approx(2.0 * math.exp(-0.05), rel=1e-14)
    assert isinstance(res.efficient_payoff, ConstantPayoff)
    with pytest.raises(AtomDetected):
        g_expectation_linear(d, Normal(0.0, 1.0))


def test_two_rate_bounds_coincide_without_spread():
    m = _scalar_market(R=0.02)
    lo, hi = two_rate_bounds(m, Lognormal(0.0, 0.2))
    assert lo == hi


def test_two_rate_bounds_are_the_two_hl_integrals():
    m = _scalar_market()
    mu = Normal(1.0, 0.3)
    lo, hi = two_rate_bounds(m, mu)
    assert lo == hl_integral(mu, density_law(m, "standard").law)
    assert hi == hl_integral(mu, density_law(m, "modified").law)


def _normal_threshold(m_spd, mu_mean, mu_sd, c):
    """For mu normal the lower check reads  m - sd z >= c sd / sqrt(v)  on the probit grid."""
    zc = -ndtri(1e-6)
    return mu_mean - mu_sd * zc - c * mu_sd / math.sqrt(m_spd.log_var)


@pytest.mark.parametrize("mean", [-10.0, -3.0, 0.0, 3.0, 10.0])
def test_sufficient_lower_matches_hand_condition(mean):
    m = _scalar_market(theta=-0.3)
    spd = density_law(m)
    margin = _normal_threshold(spd, mean, 1.0, m.lower_constant())
    res = two_rate_sufficient_lower(m, Normal(mean, 1.0))
    if margin > 1e-6:
        assert res is not None and res.attained == ATTAINED
        assert res.value == two_rate_bounds(m, Normal(mean, 1.0))[0]
    elif margin < -1e-6:
        assert res is None


def test_sufficient_upper_for_negative_point_mass():
    m = _scalar_market()
    up = two_rate_sufficient_upper(m, Dirac(-1.0))
    assert up is not None and up.certificate["side"] == "upper"
    assert two_rate_sufficient_upper(m, Dirac(1.0)) is None


def test_sublinear_value_and_attainment():
    g = TimeGrid(1.0, 4)
    mu = Normal(0.7, 2.0)
    approached = g_expectation_sublinear(SublinearDriver(g, 1, 0.1, 0.2), mu)
    assert approached.value == pytest.approx(0.7, abs=1e-12)
    assert approached.attained == APPROACHED and approached.efficient_payoff is None
    attained = g_expectation_sublinear(SublinearDriver(g, 1, [0.0, 0.1, 0.1, 0.1], 0.2), mu)
    assert attained.attained == ATTAINED
    assert np.count_nonzero(attained.efficient_payoff.weights) == 1
    assert g_expectation_sublinear(SublinearDriver(g, 1, 0.1, 0.1), Dirac(1.0)).attained == ATTAINED


def test_minimizing_sequence_has_target_law():
    p = simulate_paths(20_000, 20, 1, 1.0, seed=3)
    mu = TwoPoint(0.0, 1.0, 0.3)
    x = minimizing_sequence_payoff(mu, 0.25, p).samples(p)
    assert abs(x.mean() - 0.3) < 4 * math.sqrt(0.21 / 20_000)
    with pytest.raises(InvalidParameters):
        minimizing_sequence_payoff(mu, 0.33, p)


@pytest.mark.parametrize("weights", [np.ones(20), -np.ones(20), np.r_[np.ones(10), np.zeros(10)]])
def test_gaussian_payoff_has_target_law(weights):
    p = simulate_paths(20_000, 20, 1, 1.0, seed=4)
    mu = Lognormal(0.1, 0.5)
    x = GaussianPayoff(mu, weights).samples(p)
    assert stats.kstest(x, stats.lognorm(0.5, scale=math.exp(0.1)).cdf).pvalue > 0.001


def test_density_payoff_is_anti_comonotone_with_density():
    m = _scalar_market(theta=0.4)
    spd = density_law(m)
    p = simulate_paths(2000, 10, 1, 1.0, seed=5)
    x = DensityPayoff(Normal(0.0, 1.0), spd).samples(p)
    rho = np.exp(spd.log_samples(p))
    assert stats.spearmanr(x, rho).statistic == pytest.approx(-1.0)


def test_efficiency_result_validation():
    with pytest.raises(InvalidParameters):
        EfficiencyResult(0.0, "maybe")
    with pytest.raises(InvalidParameters):
        EfficiencyResult(0.0, ATTAINED, None)
    d = EfficiencyResult(1.0, ATTAINED, ConstantPayoff(1.0)).to_dict()
    assert d["attained"] is True and d["status"] == ATTAINED
