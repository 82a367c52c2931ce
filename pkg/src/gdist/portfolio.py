"""Portfolio selection through the quantile formulation.

Three problems are solved:

* expected utility in a two-rate market, where the optimum is
  ``X* = (u')^{-1}(lambda rho_T)``;
* rank-dependent utility under a sublinear driver, where pricing is the
  plain mean and the optimal quantile is
  ``(u')^{-1}(lambda phi'(1 - w(1 - p)))`` with ``phi`` the concave envelope
  of ``s -> 1 - w^{-1}(1 - s)``;
* rank-dependent utility under a law-invariant driver, where the optimum
  solves ``u'(x) w'(1 - F(x)) = lambda phi_y(T, x)``.

Wealth is constrained to be nonnegative throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from ._quadrature import integrate_probit
from .distkit import QuantileFunction, _Law, chebyshev_levels, expect
from .drivers import MarketParams, TwoRateDriver, density_law
from .errors import (BudgetInfeasible, HypothesisViolated, InvalidParameters,
                     RootBracketFailure)

__all__ = [
    "Utility",
    "Distortion",
    "Envelope",
    "concave_envelope",
    "envelope_of_distortion",
    "PushforwardLaw",
    "EUResult",
    "eu_two_rate",
    "RDUResult",
    "rdu_sublinear",
    "rdu_law_invariant",
]

LAMBDA_BRACKET = (1e-12, 1e12)


# ---------------------------------------------------------------------------
# Preferences


@dataclass(frozen=True, eq=False)
class Utility:
    """Increasing concave utility on ``[0, inf)``.

    ``kind`` is ``"power"`` (``x^gamma / gamma``, ``0 < gamma < 1``),
    ``"log"``, ``"exp"`` (``(1 - e^{-a x}) / a``) or ``"tabulated"`` with
    ``knots`` of ``(x, u'(x))`` (strictly decreasing marginal, linear in
    between, ``u(knots[0][0]) = 0``).
    """

    kind: str
    param: float = 0.5
    knots: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "power" and not 0 < self.param < 1:
            raise InvalidParameters("power utility needs 0 < gamma < 1")
        if self.kind == "exp" and not self.param > 0:
            raise InvalidParameters("exponential utility needs a > 0")
        if self.kind == "tabulated":
            k = np.asarray(self.knots, dtype=float)
            if k.ndim != 2 or k.shape[1] != 2 or k.shape[0] < 2:
                raise InvalidParameters("tabulated utility needs (x, u'(x)) knots")
            if np.any(np.diff(k[:, 0]) <= 0) or np.any(np.diff(k[:, 1]) >= 0) or np.any(k[:, 1] <= 0):
                raise InvalidParameters("tabulated marginal utility must be positive and "
                                        "strictly decreasing on increasing x")
            object.__setattr__(self, "knots", k)
        elif self.kind not in ("power", "log", "exp"):
            raise InvalidParameters(f"unknown utility kind {self.kind!r}")

    @classmethod
    def from_dict(cls, spec: dict) -> "Utility":
        kind = spec["kind"]
        if kind == "power":
            return cls("power", float(spec["gamma"]))
        if kind == "exp":
            return cls("exp", float(spec["a"]))
        if kind == "tabulated":
            return cls("tabulated", 0.0, np.asarray(spec["knots"], dtype=float))
        return cls(kind)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "power":
            return x**self.param / self.param
        if self.kind == "log":
            with np.errstate(divide="ignore"):
                return np.log(x)
        if self.kind == "exp":
            return -np.expm1(-self.param * x) / self.param
        k = self.knots
        xs, ms = k[:, 0], k[:, 1]
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (ms[1:] + ms[:-1]) * np.diff(xs))])
        xc = np.clip(x, xs[0], xs[-1])
        j = np.clip(np.searchsorted(xs, xc, side="right") - 1, 0, xs.size - 2)
        d = xc - xs[j]
        slope = (ms[j + 1] - ms[j]) / (xs[j + 1] - xs[j])
        return cum[j] + ms[j] * d + 0.5 * slope * d * d + ms[-1] * np.maximum(x - xs[-1], 0.0)

    def marginal(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "power":
            with np.errstate(divide="ignore"):
                return x ** (self.param - 1.0)
        if self.kind == "log":
            with np.errstate(divide="ignore"):
                return 1.0 / x
        if self.kind == "exp":
            return np.exp(-self.param * x)
        k = self.knots
        return np.interp(x, k[:, 0], k[:, 1])

    def inverse_marginal(self, v):
        """``(u')^{-1}(v)``, floored at 0 where the marginal never gets that large."""
        v = np.asarray(v, dtype=float)
        if self.kind == "power":
            return v ** (1.0 / (self.param - 1.0))
        if self.kind == "log":
            return 1.0 / v
        if self.kind == "exp":
            return np.maximum(-np.log(v) / self.param, 0.0)
        k = self.knots
        return np.interp(-v, -k[:, 1], k[:, 0])

    def to_dict(self) -> dict:
        if self.kind == "power":
            return {"kind": "power", "gamma": self.param}
        if self.kind == "exp":
            return {"kind": "exp", "a": self.param}
        if self.kind == "tabulated":
            return {"kind": "tabulated", "knots": self.knots.tolist()}
        return {"kind": "log"}


@dataclass(frozen=True, eq=False)
class Distortion:
    """Probability distortion ``w`` on ``[0, 1]``.

    ``"power"`` is ``w(p) = p^a``; ``"tabulated"`` takes ``(p, w)`` knots
    from ``(0, 0)`` to ``(1, 1)``, linear in between.
    """

    kind: str
    param: float = 1.0
    knots: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "power":
            if not self.param > 0:
                raise InvalidParameters("power distortion needs a > 0")
        elif self.kind == "tabulated":
            k = np.asarray(self.knots, dtype=float)
            if (k.ndim != 2 or k.shape[1] != 2 or k[0, 0] != 0 or k[-1, 0] != 1
                    or k[0, 1] != 0 or k[-1, 1] != 1):
                raise InvalidParameters("tabulated distortion must run from (0,0) to (1,1)")
            if np.any(np.diff(k[:, 0]) <= 0) or np.any(np.diff(k[:, 1]) <= 0):
                raise InvalidParameters("tabulated distortion must be strictly increasing")
            object.__setattr__(self, "knots", k)
        else:
            raise InvalidParameters(f"unknown distortion kind {self.kind!r}")

    @classmethod
    def from_dict(cls, spec: dict) -> "Distortion":
        if spec["kind"] == "power":
            return cls("power", float(spec["a"]))
        return cls("tabulated", 0.0, np.asarray(spec["knots"], dtype=float))

    def to_dict(self) -> dict:
        if self.kind == "power":
            return {"kind": "power", "a": self.param}
        return {"kind": "tabulated", "knots": self.knots.tolist()}

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        if self.kind == "power":
            return p**self.param
        return np.interp(p, self.knots[:, 0], self.knots[:, 1])

    def derivative(self, p):
        p = np.asarray(p, dtype=float)
        if self.kind == "power":
            with np.errstate(divide="ignore"):
                return self.param * p ** (self.param - 1.0)
        k = self.knots
        slopes = np.diff(k[:, 1]) / np.diff(k[:, 0])
        j = np.clip(np.searchsorted(k[:, 0], p, side="right") - 1, 0, slopes.size - 1)
        return slopes[j]

    def inverse(self, q):
        q = np.asarray(q, dtype=float)
        if self.kind == "power":
            return q ** (1.0 / self.param)
        return np.interp(q, self.knots[:, 1], self.knots[:, 0])

    def inverse_derivative(self, v):
        """``(w')^{-1}(v)`` for concave ``w``: the level where the slope equals ``v``, in [0, 1]."""
        v = np.asarray(v, dtype=float)
        if self.kind == "power":
            a = self.param
            if a == 1.0:
                return np.where(v < 1.0, 1.0, 0.0)
            with np.errstate(divide="ignore", over="ignore"):
                return np.clip((v / a) ** (1.0 / (a - 1.0)), 0.0, 1.0)
        k = self.knots
        slopes = np.diff(k[:, 1]) / np.diff(k[:, 0])
        # For decreasing slopes, the level is the left end of the first segment with slope <= v.
        idx = np.searchsorted(-slopes, -v, side="left")
        return np.where(idx >= slopes.size, 1.0, k[np.minimum(idx, slopes.size - 1), 0])

    def is_concave(self, n: int = 2001) -> bool:
        if self.kind == "power":
            return self.param <= 1.0
        slopes = np.diff(self.knots[:, 1]) / np.diff(self.knots[:, 0])
        return bool(np.all(np.diff(slopes) <= 1e-12 * np.max(np.abs(slopes))))


# ---------------------------------------------------------------------------
# Concave envelope


@dataclass(frozen=True, eq=False)
class Envelope:
    """Upper concave envelope of a function tabulated on ``grid``.

    ``hull`` holds the indices of the hull vertices. When the underlying
    function and its derivative are supplied, :meth:`derivative` returns the
    exact derivative where the envelope follows the function and the chord
    slope on affine patches.
    """

    grid: np.ndarray
    fn_values: np.ndarray
    hull: np.ndarray
    fn: Optional[Callable] = None
    dfn: Optional[Callable] = None
    dfn_complement: Optional[Callable] = None

    @property
    def values(self) -> np.ndarray:
        return self(self.grid)

    @property
    def slopes(self) -> np.ndarray:
        hx, hy = self.grid[self.hull], self.fn_values[self.hull]
        return np.diff(hy) / np.diff(hx)

    def _segment(self, p):
        hx = self.grid[self.hull]
        return np.clip(np.searchsorted(hx, p, side="right") - 1, 0, hx.size - 2)

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        hx, hy = self.grid[self.hull], self.fn_values[self.hull]
        j = self._segment(p)
        # Hit the right vertex exactly; the chord formula can be an ulp off there.
        return np.where(p == hx[j + 1], hy[j + 1], _chord(hx[j], hy[j], hx[j + 1], hy[j + 1], p))

    def derivative(self, p, complement=None):
        """Envelope slope at ``p``.

        On hull segments spanning a single grid cell the envelope follows the
        function, and the exact derivative is returned; on longer segments it
        is affine and the chord slope is returned. ``complement`` may carry
        ``1 - p`` at full precision, which matters as ``p -> 1``.
        """
        p = np.asarray(p, dtype=float)
        seg = self._segment(p)
        slope = self.slopes[seg]
        if self.dfn is None:
            return slope
        contact = np.diff(self.hull)[seg] == 1
        if complement is not None and self.dfn_complement is not None:
            exact = np.asarray(self.dfn_complement(complement), dtype=float)
        else:
            exact = np.asarray(self.dfn(p), dtype=float)
        return np.where(contact, exact, slope)


def _chord(x0, y0, x1, y1, x):
    return y0 + (y1 - y0) * (x - x0) / (x1 - x0)


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def concave_envelope(grid, values, fn: Optional[Callable] = None,
                     dfn: Optional[Callable] = None,
                     dfn_complement: Optional[Callable] = None) -> Envelope:
    """Upper hull of the points ``(grid_i, values_i)`` by the monotone chain."""
    x = np.asarray(grid, dtype=float)
    y = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.shape != y.shape or x.size < 2:
        raise InvalidParameters("need matching 1-d grid and values with at least two points")
    if np.any(np.diff(x) <= 0):
        raise InvalidParameters("grid must be strictly increasing")
    if not np.all(np.isfinite(y)):
        raise InvalidParameters("function values must be finite")
    hull: list[int] = []
    for i in range(x.size):
        while len(hull) >= 2 and _cross((x[hull[-2]], y[hull[-2]]), (x[hull[-1]], y[hull[-1]]),
                                        (x[i], y[i])) >= 0:
            hull.pop()
        hull.append(i)
    return Envelope(x, y, np.asarray(hull), fn, dfn, dfn_complement)


def envelope_of_distortion(w: Distortion, n: int = 4097) -> Envelope:
    """Concave envelope of ``s -> 1 - w^{-1}(1 - s)`` on ``[0, 1]``."""
    s = np.linspace(0.0, 1.0, n)

    def fn(s):
        return 1.0 - w.inverse(1.0 - np.asarray(s, dtype=float))

    if w.kind == "power":
        a = w.param

        def dfn_c(c):
            with np.errstate(divide="ignore", invalid="ignore"):
                return (1.0 / a) * np.asarray(c, dtype=float) ** (1.0 / a - 1.0)
    else:
        def dfn_c(c):
            return 1.0 / w.derivative(w.inverse(np.asarray(c, dtype=float)))

    def dfn(s):
        return dfn_c(1.0 - np.asarray(s, dtype=float))

    return concave_envelope(s, fn(s), fn, dfn, dfn_c)


# ---------------------------------------------------------------------------
# Laws of optimal payoffs


@dataclass(frozen=True, eq=False)
class PushforwardLaw(_Law):
    """Law with quantile ``z -> transform(base.quantile_z(+-z))``; ``transform`` is monotone."""

    base: object
    transform: Callable
    reverse: bool = False

    def quantile_z(self, z):
        z = np.asarray(z, dtype=float)
        return self.transform(self.base.quantile_z(-z if self.reverse else z))

    def quantile(self, p):
        return self.quantile_z(ndtri(np.asarray(p, dtype=float)))


# ---------------------------------------------------------------------------
# Expected utility with two rates


@dataclass
class EUResult:
    lam: float
    budget: float
    budget_residual: float
    law: object
    payoff: Callable
    certificate: dict = field(default_factory=dict)

    def quantile(self, p):
        return self.law.quantile(p)

    def to_dict(self, levels=None) -> dict:
        p = chebyshev_levels(65) if levels is None else np.asarray(levels, dtype=float)
        return {"lambda": self.lam, "budget": self.budget,
                "budget_residual": self.budget_residual,
                "quantile_levels": p.tolist(), "quantiles": self.quantile(p).tolist(),
                "certificate": self.certificate}


def _solve_lambda(budget: Callable, target: float, what: str) -> float:
    lo, hi = LAMBDA_BRACKET

    def g(loglam):
        return budget(math.exp(loglam)) - target

    a, b = math.log(lo), math.log(hi)
    ga, gb = g(a), g(b)
    if not (math.isfinite(ga) and math.isfinite(gb)) or ga * gb > 0:
        raise BudgetInfeasible(f"{what}: budget target outside the attainable range",
                               target=target, at_low=ga + target, at_high=gb + target)
    root = brentq(g, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return math.exp(root)


def eu_two_rate(u: Utility, market, x0: float) -> EUResult:
    """Maximize ``E[u(X)]`` over ``X >= 0`` with two-rate price ``x0``."""
    from .efficiency import two_rate_sufficient_lower

    m: MarketParams = market.market if isinstance(market, TwoRateDriver) else market
    if not x0 > 0:
        raise InvalidParameters("initial wealth must be positive")
    c = m.lower_constant()
    if c > 0:
        raise HypothesisViolated("the EU solution needs 1'(sigma')^{-1} theta <= 0 at every node",
                                 sup_value=c)
    spd = density_law(m, "standard")
    if spd.log_var <= 0.0:
        rho = spd.discount()
        x_star = x0 / rho
        lam = float(u.marginal(x_star)) / rho
        law = PushforwardLaw(spd.law, lambda _: np.full(np.shape(_), x_star))
        return EUResult(lam, x_star * rho, 0.0, law, lambda r: np.full(np.shape(r), x_star),
                        {"result": "deterministic density", "c": c})
    rho_law = spd.law

    def budget(lam):
        return expect(rho_law, lambda r: r * u.inverse_marginal(lam * r))

    lam = _solve_lambda(budget, x0, "expected utility")
    b = budget(lam)
    law = PushforwardLaw(rho_law, lambda r: u.inverse_marginal(lam * r), reverse=True)
    cert = two_rate_sufficient_lower(m, law)
    return EUResult(lam, b, abs(b - x0) / x0, law, lambda r: u.inverse_marginal(lam * np.asarray(r)),
                    {"c": c, "sufficient_lower": None if cert is None else cert.attained})


# ---------------------------------------------------------------------------
# Rank-dependent utility


@dataclass
class RDUResult:
    lam: float
    levels: np.ndarray
    quantiles: np.ndarray
    objective: float
    budget_residual: float
    diagnostics: dict = field(default_factory=dict)
    quantile_z: Optional[Callable] = None

    def quantile(self, p):
        return self.quantile_z(ndtri(np.asarray(p, dtype=float)))

    def to_quantile(self) -> QuantileFunction:
        return QuantileFunction(self.levels, self.quantiles, "linear", "flat")

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "objective": self.objective,
                "budget_residual": self.budget_residual,
                "quantile_levels": self.levels.tolist(), "quantiles": self.quantiles.tolist(),
                "diagnostics": self.diagnostics}


def _objective(u: Utility, w: Distortion, qz: Callable) -> float:
    """``int_0^1 u(q(p)) w'(1 - p) dp`` in the probit variable."""
    return integrate_probit(lambda z: u(qz(z)) * w.derivative(ndtr(-z)), rtol=1e-10)


def rdu_sublinear(u: Utility, w: Distortion, y0: float, envelope: Optional[Envelope] = None,
                  levels=None) -> RDUResult:
    """Optimal quantile for RDU when any law costs its mean.

    The quantile is ``(u')^{-1}(lambda phi'(1 - w(1 - p)))`` with ``phi`` the
    concave envelope of ``s -> 1 - w^{-1}(1 - s)`` and ``lambda`` fixed by
    ``int_0^1 q(p) dp = y0``.
    """
    if not y0 > 0:
        raise InvalidParameters("initial wealth must be positive")
    env = envelope_of_distortion(w) if envelope is None else envelope

    def slope_z(z):
        # s = 1 - w(1 - p) with 1 - p = Phi(-z); pass 1 - s exactly.
        c = w(ndtr(-np.asarray(z, dtype=float)))
        return env.derivative(1.0 - c, complement=c)

    def qz_for(lam):
        def qz(z):
            with np.errstate(divide="ignore", over="ignore"):
                return u.inverse_marginal(lam * slope_z(z))
        return qz

    def budget(lam):
        return integrate_probit(qz_for(lam), rtol=1e-12)

    lam = _solve_lambda(budget, y0, "sublinear RDU")
    qz = qz_for(lam)
    p = chebyshev_levels(2048) if levels is None else np.asarray(levels, dtype=float)
    q = qz(ndtri(p))
    b = budget(lam)
    return RDUResult(lam, p, q, _objective(u, w, qz), abs(b - y0) / y0,
                     {"envelope_vertices": int(env.hull.size)}, qz)


def _hypotheses(w: Distortion, phi, u: Utility):
    if not w.is_concave():
        raise HypothesisViolated("distortion must be concave")
    y = np.linspace(phi.y_grid[0], phi.y_grid[-1], 2001)
    fT = np.asarray(phi.f(phi.T, y), dtype=float) * np.ones_like(y)
    if np.any(fT > 1e-14):
        raise HypothesisViolated("f(T, .) must be nonpositive", max_f=float(np.max(fT)))


def _clamp_point(lam, sl, u: Utility, w: Distortion, x_hi: float) -> Optional[float]:
    """Wealth level where ``lambda phi_y(T, x) / u'(x)`` crosses ``w'(1)``, if inside the range."""
    level = float(w.derivative(1.0))

    def ratio(x):
        with np.errstate(divide="ignore"):
            return lam * float(sl.dphi(np.array([x]))[0]) / float(u.marginal(x)) - level

    if not (ratio(0.0) < 0.0 < ratio(x_hi)):
        return None
    return brentq(ratio, 0.0, x_hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def rdu_law_invariant(u: Utility, w: Distortion, phi, y0: float, levels=None,
                      x_max: float = 1e12, cells: int = 3000) -> RDUResult:
    """Optimal law for RDU under a law-invariant driver with transform ``phi``.

    The CDF is ``F(x) = 1 - (w')^{-1}(lambda phi_y(T, x) / u'(x))`` clamped to
    ``[0, 1]``; ``lambda`` solves ``E[phi(T, X)] = phi(0, y0)``. The budget is
    evaluated as ``phi(T, 0) + int_0^inf phi_y(T, x) (1 - F(x)) dx``.
    """
    _hypotheses(w, phi, u)
    T = phi.T
    target = float(phi.phi(0.0, np.array([y0]))[0])
    # x cells: [0, 1e-10] then geometric, stopping before phi_y leaves the floating range.
    edges = np.concatenate([[0.0], np.geomspace(1e-10, x_max, cells)])
    sl = phi._slice(phi._k(T))
    expo = -2.0 * sl.inner_at(edges)
    ok = np.abs(expo) < 650.0
    last = int(np.flatnonzero(ok)[-1]) if np.all(ok[:2]) else 0
    if last < 2:
        raise HypothesisViolated("phi_y(T, .) overflows immediately; no usable wealth range")
    edges = edges[: last + 1]
    x_hi = float(edges[-1])
    phi0 = float(sl.phi(np.array([0.0]))[0])

    def survival(lam, dp, mg):
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            v = lam * dp / mg
        v = np.where(np.isfinite(v), v, np.inf)
        return w.inverse_derivative(v)

    def make_budget(cut_edges):
        gx, gw = np.polynomial.legendre.leggauss(16)
        a, b = cut_edges[:-1], cut_edges[1:]
        xs = 0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * gx
        wts = 0.5 * (b - a)[:, None] * gw
        dphi = sl.dphi(xs)
        marg = u.marginal(xs)

        def budget(lam):
            return phi0 + math.fsum((dphi * survival(lam, dphi, marg) * wts).ravel().tolist())

        return budget, dphi, marg

    budget, dphi, marg = make_budget(edges)
    lam = _solve_lambda(budget, target, "law-invariant RDU")
    # The survival function has a kink where the clamp at 1 releases; put it on a cell edge.
    kink = _clamp_point(lam, sl, u, w, x_hi)
    if kink is not None:
        edges = np.unique(np.append(edges, kink))
        budget, dphi, marg = make_budget(edges)
        lam = _solve_lambda(budget, target, "law-invariant RDU")
    b_val = budget(lam)
    tail = float(survival(lam, dphi[-1:, -1:], marg[-1:, -1:])[0, 0])

    def h_ratio(x):
        return u.marginal(x) / sl.dphi(x)

    def qz(z):
        """``x*(p)``: the root of ``u'(x) w'(1-p) = lambda phi_y(T, x)``, or 0."""
        z = np.asarray(z, dtype=float)
        wq = w.derivative(ndtr(-z))
        lo = np.zeros_like(z)
        hi = np.full_like(z, x_hi)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            at0 = u.marginal(np.zeros_like(z)) * wq - lam * sl.dphi(np.zeros_like(z))
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                pos = h_ratio(mid) * wq > lam
                lo = np.where(pos, mid, lo)
                hi = np.where(pos, hi, mid)
                if np.all(hi - lo <= 4e-16 * np.maximum(hi, 1e-300)):
                    break
        return np.where(at0 <= 0, 0.0, 0.5 * (lo + hi))

    p = chebyshev_levels(2048) if levels is None else np.asarray(levels, dtype=float)
    zq = ndtri(p)
    q = qz(zq)
    interior = q > 0
    lhs = u.marginal(q[interior]) * w.derivative(1.0 - p[interior])
    rhs = lam * sl.dphi(q[interior])
    foc = float(np.max(np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1e-300))) if np.any(interior) else 0.0
    xg = edges[1:]
    cdf = 1.0 - survival(lam, sl.dphi(xg), u.marginal(xg))
    diag = {
        "foc_relative_residual": foc,
        "cdf_monotone": bool(np.all(np.diff(cdf) >= -1e-12)),
        "clamped_at_one": float(np.mean(cdf >= 1.0)),
        "x_max": x_hi,
        "tail_survival_at_x_max": tail,
        "budget_value": b_val,
        "budget_target": target,
    }
    if not diag["cdf_monotone"]:
        raise RootBracketFailure("first-order condition produced a non-monotone CDF")
    return RDUResult(lam, p, q, _objective(u, w, qz),
                     abs(b_val - target) / max(abs(target), 1e-300), diag, qz)
