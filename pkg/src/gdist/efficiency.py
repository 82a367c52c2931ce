"""g-expectations of distributions: the smallest BSDE price over all payoffs with a given law.

Closed forms are available for linear drivers (anti-comonotonic coupling
with the state-price density), as certified bounds and sufficient conditions
for the two-rate driver, and as the plain mean for sublinear drivers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtri

from .bsde import MCEstimate, PathEnsemble, solve_lsmc
from .distkit import hl_integral
from .drivers import (LinearDriver, MarketParams, StatePriceDensity, SublinearDriver,
                      TwoRateDriver, density_law)
from .errors import AtomDetected, InvalidParameters

__all__ = [
    "EfficiencyResult",
    "DensityPayoff",
    "GaussianPayoff",
    "ConstantPayoff",
    "g_expectation_linear",
    "two_rate_bounds",
    "two_rate_sufficient_lower",
    "two_rate_sufficient_upper",
    "g_expectation_sublinear",
    "minimizing_sequence_payoff",
    "minimizing_sequence_cost",
]

CHECK_POINTS = 4096
CHECK_TAIL = 1e-6

ATTAINED = "attained"
APPROACHED = "approached"
BOUND_ONLY = "bound-only"


def _is_dirac(mu) -> Optional[float]:
    atoms = mu.atoms()
    if atoms is not None and len(atoms[0]) == 1:
        return float(atoms[0][0])
    return None


# ---------------------------------------------------------------------------
# Payoff descriptors: a recipe to build X on a path ensemble, plus a Markov
# state to regress on.


@dataclass(frozen=True, eq=False)
class ConstantPayoff:
    value: float

    def samples(self, paths: PathEnsemble) -> np.ndarray:
        return np.full(paths.n_paths, self.value)

    def regressors(self, paths: PathEnsemble):
        return None

    def describe(self) -> dict:
        return {"form": "constant", "value": self.value}


@dataclass(frozen=True, eq=False)
class DensityPayoff:
    """``X = mu^{-1}(1 - F(rho_T))`` for a lognormal pricing density ``rho_T``."""

    mu: object
    density: StatePriceDensity

    def samples(self, paths: PathEnsemble) -> np.ndarray:
        z = (self.density.log_samples(paths) - self.density.log_mean) / math.sqrt(self.density.log_var)
        return self.mu.quantile_z(-z)

    def regressors(self, paths: PathEnsemble) -> np.ndarray:
        return self.density.log_process(paths)[:, :, None]

    def describe(self) -> dict:
        return {"form": "mu_inv(1 - F_rho(rho_T))", "density": self.density.kind,
                "log_mean": self.density.log_mean, "log_var": self.density.log_var}


@dataclass(frozen=True, eq=False)
class GaussianPayoff:
    """``X = mu^{-1}(Phi(W_T / sd))`` with ``W_t = int_0^t w_s dB^1_s``.

    ``weights`` holds ``w`` per grid interval (piecewise constant) and ``sd``
    is the standard deviation of ``W_T``, so ``X ~ mu`` exactly.
    """

    mu: object
    weights: np.ndarray

    @classmethod
    def on_set(cls, mu, mask, sign: float = 1.0) -> "GaussianPayoff":
        """Weights ``sign`` on the flagged intervals and zero elsewhere."""
        return cls(mu, np.where(np.asarray(mask, dtype=bool), float(sign), 0.0))

    def _state(self, paths: PathEnsemble) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        if w.size != paths.n_steps:
            raise InvalidParameters("payoff weights do not match the path grid")
        out = np.zeros((paths.n_paths, paths.n_steps + 1))
        np.cumsum(paths.increments[:, :, 0] * w[None, :], axis=1, out=out[:, 1:])
        return out

    def _sd(self, paths: PathEnsemble) -> float:
        w = np.asarray(self.weights, dtype=float)
        var = math.fsum((w * w).tolist()) * paths.dt
        if var <= 0:
            raise InvalidParameters("payoff weights vanish identically")
        return math.sqrt(var)

    def samples(self, paths: PathEnsemble) -> np.ndarray:
        return self.mu.quantile_z(self._state(paths)[:, -1] / self._sd(paths))

    def regressors(self, paths: PathEnsemble) -> np.ndarray:
        return self._state(paths)[:, :, None]

    def describe(self) -> dict:
        return {"form": "mu_inv(Phi(int w dB^1 / sd))",
                "weights": np.asarray(self.weights, dtype=float).tolist()}


@dataclass
class EfficiencyResult:
    """Value of ``inf_{X ~ mu} E_g[X]`` and how it was certified.

    ``attained`` is one of ``"attained"``, ``"approached"`` and
    ``"bound-only"``; in the last case ``value`` is a lower bound only.
    """

    value: float
    attained: str
    efficient_payoff: Optional[object] = None
    certificate: dict = field(default_factory=dict)
    std_err: Optional[float] = None

    def __post_init__(self):
        if self.attained not in (ATTAINED, APPROACHED, BOUND_ONLY):
            raise InvalidParameters(f"unknown attainment flag {self.attained!r}")
        if self.attained == ATTAINED and self.efficient_payoff is None:
            raise InvalidParameters("an attained result needs its efficient payoff")

    def to_dict(self) -> dict:
        out = {"value": self.value, "std_err": self.std_err,
               "attained": self.attained == ATTAINED, "status": self.attained,
               "certificate": self.certificate,
               "grid_bounds": self.certificate.get("grid_bounds")}
        if self.efficient_payoff is not None:
            out["efficient_payoff"] = self.efficient_payoff.describe()
        return out


# ---------------------------------------------------------------------------
# Linear drivers


def g_expectation_linear(driver: LinearDriver, mu) -> EfficiencyResult:
    """``int_0^1 F_rho^{-1}(1-p) mu^{-1}(p) dp - int_0^T delta_s e^{-int_0^s r} ds``."""
    spd = density_law(driver)
    offset = driver.discounted_delta_integral()
    c = _is_dirac(mu)
    if spd.log_var <= 0.0:
        if c is None:
            raise AtomDetected("the state-price density is deterministic; "
                               "every coupling has the same price but the law must be a point mass "
                               "for a unique efficient payoff")
        return EfficiencyResult(c * spd.discount() - offset, ATTAINED, ConstantPayoff(c),
                                {"result": "linear closed form", "density": "deterministic"})
    value = hl_integral(mu, spd.law) - offset
    payoff = ConstantPayoff(c) if c is not None else DensityPayoff(mu, spd)
    return EfficiencyResult(value, ATTAINED, payoff,
                            {"result": "linear closed form",
                             "log_mean": spd.log_mean, "log_var": spd.log_var,
                             "delta_term": offset})


# ---------------------------------------------------------------------------
# Two-rate driver


def _market(obj) -> MarketParams:
    return obj.market if isinstance(obj, TwoRateDriver) else obj


def two_rate_bounds(market, mu) -> tuple[float, float]:
    """Hardy-Littlewood lower bounds under the deposit-rate and loan-rate densities."""
    market = _market(market)
    lo = hl_integral(mu, density_law(market, "standard").law)
    hi = hl_integral(mu, density_law(market, "modified").law)
    return lo, hi


def _check_grid(spd: StatePriceDensity, mu, n: int = CHECK_POINTS, tail: float = CHECK_TAIL):
    """``x`` grid (uniform in the density's probit) and ``f(x) = mu^{-1}(1 - F(x))``."""
    zc = float(-ndtri(tail))
    z = np.linspace(-zc, zc, n)
    s = math.sqrt(spd.log_var)
    x = np.exp(spd.log_mean + s * z)
    f = mu.quantile_z(-z)
    return x, f


def _sufficient(market, mu, kind: str) -> Optional[EfficiencyResult]:
    market = _market(market)
    spd = density_law(market, kind)
    if kind == "standard":
        c = market.lower_constant()
    else:
        c = market.upper_constant()
    c0 = _is_dirac(mu)
    if spd.log_var <= 0.0:
        if c0 is None:
            return None
        holds = c0 >= 0 if kind == "standard" else c0 <= 0
        bounds = None
        margin = c0 if kind == "standard" else -c0
    else:
        x, f = _check_grid(spd, mu)
        fx = (f[2:] - f[:-2]) / (x[2:] - x[:-2])
        xi, fi = x[1:-1], f[1:-1]
        rhs = -c * xi * fx
        gap = fi - rhs if kind == "standard" else rhs - fi
        scale = np.abs(fi) + np.abs(rhs)
        tol = 1e-12 * scale
        holds = bool(np.all(gap >= -tol))
        bounds = [float(x[0]), float(x[-1])]
        margin = float(np.min(gap))
    if not holds:
        return None
    value = hl_integral(mu, spd.law)
    payoff = ConstantPayoff(c0) if c0 is not None else DensityPayoff(mu, spd)
    cert = {"result": "two-rate sufficient condition",
            "side": "lower" if kind == "standard" else "upper",
            "c": c, "grid_points": CHECK_POINTS, "grid_bounds": bounds,
            "min_margin": margin}
    return EfficiencyResult(value, ATTAINED, payoff, cert)


def two_rate_sufficient_lower(market, mu) -> Optional[EfficiencyResult]:
    """Attainment of the deposit-rate bound, or ``None`` when the grid check fails.

    The check is ``f(x) >= -c x f'(x)`` with ``f(x) = mu^{-1}(1 - F_rho(x))``
    and ``c = sup_t 1'(sigma_t')^{-1} theta_t``.
    """
    return _sufficient(market, mu, "standard")


def two_rate_sufficient_upper(market, mu) -> Optional[EfficiencyResult]:
    """Mirror of :func:`two_rate_sufficient_lower` under the loan-rate density.

    The check is ``f(x) <= -c x f'(x)`` with
    ``c = inf_t 1'(sigma_t')^{-1}(theta_t - (R_t - r_t) sigma_t^{-1} 1)``.
    """
    return _sufficient(market, mu, "modified")


# ---------------------------------------------------------------------------
# Sublinear drivers


def g_expectation_sublinear(driver: SublinearDriver, mu) -> EfficiencyResult:
    """``E[mu]``; attained when ``mu`` is a point mass or the zero-cost set has positive measure."""
    value = float(mu.mean())
    c0 = _is_dirac(mu)
    measure = driver.zero_cost_measure()
    cert = {"result": "sublinear mean", "zero_cost_measure": measure,
            "lipschitz": driver.lipschitz}
    if c0 is not None:
        return EfficiencyResult(value, ATTAINED, ConstantPayoff(c0), cert)
    if measure > 0:
        a_zero = np.all(driver.A == 0, axis=1)
        c_zero = np.all(driver.C == 0, axis=1)
        # Z >= 0 costs nothing where A vanishes, Z <= 0 where C vanishes.
        if np.any(a_zero):
            payoff = GaussianPayoff.on_set(mu, a_zero, 1.0)
        else:
            payoff = GaussianPayoff.on_set(mu, c_zero, -1.0)
        return EfficiencyResult(value, ATTAINED, payoff, cert)
    return EfficiencyResult(value, APPROACHED, None, cert)


def minimizing_sequence_payoff(mu, alpha: float, paths: PathEnsemble) -> GaussianPayoff:
    """``mu^{-1}(Phi(B^1_alpha / sqrt(alpha)))`` as a payoff descriptor."""
    k = alpha / paths.dt
    kr = int(round(k))
    if not (0 < alpha <= paths.T * (1 + 1e-12)) or abs(k - kr) > 1e-9 or kr < 1:
        raise InvalidParameters("alpha must be a grid time in (0, T]")
    mask = np.zeros(paths.n_steps, dtype=bool)
    mask[:kr] = True
    return GaussianPayoff.on_set(mu, mask, 1.0)


def minimizing_sequence_cost(driver, mu, alpha: float, paths: PathEnsemble,
                             basis_degree: int = 4, control_variate: bool = True) -> MCEstimate:
    """LSMC estimate of ``E_g[X^alpha]`` for the minimizing sequence.

    With ``control_variate`` the known mean ``E[mu]`` replaces the sample
    mean of ``X^alpha`` so only the driver integral is simulated.
    """
    payoff = minimizing_sequence_payoff(mu, alpha, paths)
    x = payoff.samples(paths)
    mean = float(mu.mean()) if control_variate else None
    sol = solve_lsmc(driver, x, paths, basis_degree, regressors=payoff.regressors(paths),
                     terminal_mean=mean)
    return MCEstimate(sol.y0, sol.std_err)
