"""Law-invariant g-expectations for drivers ``g = f(t, y) ||z||^2 + h(t, y)``.

When ``2 f_y h + 2 f h_y - h_yy + 2 f_t = 0`` the map

    phi(t, y) = E(t) int_0^y exp(-2 int_0^z f(t, x) dx) dz - int_0^t E(u) h(u, 0) du,
    E(t) = exp(int_0^t [2 f h - h_y](s, 0) ds),

turns ``phi(t, Y_t)`` into a martingale, so the price of any payoff with law
``mu`` is ``phi(0, .)^{-1}(E[phi(T, mu)])``.

All integrals are composite Gauss-Legendre on the supplied grids, nested
where an integrand is itself an integral.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import brentq

from .bsde import PathEnsemble, solve_lsmc
from .distkit import expect
from .drivers import ZSeparableDriver
from .errors import (InadmissibleDistribution, InvalidParameters, LawMismatch, NonIntegrable,
                     QuadratureOverflow, RootBracketFailure)

__all__ = [
    "PdeResidual",
    "pde_residual",
    "PhiTransform",
    "build_phi",
    "phi_for_driver",
    "law_invariant_expectation",
    "InvarianceReport",
    "invariance_probe",
    "default_constructions",
]

NODES = 16
EXP_LIMIT = 700.0
SAFETY = 1.05
FD_STEP = 1e-5
_X, _W = np.polynomial.legendre.leggauss(NODES)


def _gl_partial(fn, a, b):
    """``int_a^b fn(s) ds`` for arrays ``a``, ``b`` with one 16-point panel each."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    s = mid[..., None] + half[..., None] * _X
    return (np.asarray(fn(s), dtype=float) @ _W) * half


def _as_field(fn):
    """Wrap scalars into vectorized callables of ``(t, y)``."""
    if callable(fn):
        return fn
    c = float(fn)
    return lambda t, y: np.full(np.broadcast_shapes(np.shape(t), np.shape(y)), c)


# ---------------------------------------------------------------------------
# Compatibility condition


@dataclass(frozen=True)
class PdeResidual:
    max_abs: float
    h_grid: float
    threshold: float

    @property
    def ok(self) -> bool:
        return self.max_abs <= self.threshold

    def to_dict(self) -> dict:
        return {"max_abs": self.max_abs, "h_grid": self.h_grid,
                "h_grid_sq": self.h_grid**2, "threshold": self.threshold, "ok": self.ok}


def pde_residual(f, h, t_grid, y_grid) -> PdeResidual:
    """Max of ``|2 f_y h + 2 f h_y - h_yy + 2 f_t|`` over interior grid nodes.

    Partials are centered differences with the grid spacings, so the
    residual of an exact solution pair is ``O(h_grid^2)``.
    """
    f, h = _as_field(f), _as_field(h)
    t = np.asarray(t_grid, dtype=float)
    y = np.asarray(y_grid, dtype=float)
    if t.size < 3 or y.size < 3:
        raise InvalidParameters("need at least three grid points in t and y")
    dt = np.diff(t)
    dy = np.diff(y)
    if not (np.allclose(dt, dt[0]) and np.allclose(dy, dy[0])) or dt[0] <= 0 or dy[0] <= 0:
        raise InvalidParameters("pde_residual needs uniform increasing grids")
    dt, dy = float(dt[0]), float(dy[0])
    F = np.asarray(f(t[:, None], y[None, :]), dtype=float) * np.ones((t.size, y.size))
    H = np.asarray(h(t[:, None], y[None, :]), dtype=float) * np.ones((t.size, y.size))
    c = (slice(1, -1), slice(1, -1))
    f_y = (F[1:-1, 2:] - F[1:-1, :-2]) / (2 * dy)
    h_y = (H[1:-1, 2:] - H[1:-1, :-2]) / (2 * dy)
    h_yy = (H[1:-1, 2:] - 2 * H[c] + H[1:-1, :-2]) / dy**2
    f_t = (F[2:, 1:-1] - F[:-2, 1:-1]) / (2 * dt)
    res = 2 * f_y * H[c] + 2 * F[c] * h_y - h_yy + 2 * f_t
    hg = max(dt, dy)
    scale = 0.0
    if y.size >= 4:
        scale = max(scale, float(np.max(np.abs(np.diff(F, 3, axis=1)))) / dy**3,
                    float(np.max(np.abs(np.diff(H, 3, axis=1)))) / dy**3)
    if t.size >= 4:
        scale = max(scale, float(np.max(np.abs(np.diff(F, 3, axis=0)))) / dt**3)
    return PdeResidual(float(np.max(np.abs(res))), hg, 1e-6 + 10 * hg**2 * scale)


# ---------------------------------------------------------------------------
# The transform


class _Slice:
    """``phi(t_k, .)`` at one time node: cumulative integrals at the y nodes."""

    def __init__(self, fk: Callable, y: np.ndarray, origin: int, factor: float, drift: float):
        self.fk, self.y, self.origin = fk, y, origin
        self.factor, self.drift = factor, drift
        a, b = y[:-1], y[1:]
        cell_f = _gl_partial(fk, a, b)
        self.inner = self._cumulate(cell_f)
        self._check(self.inner)
        base = self.inner[:-1]

        def outer(s):
            left = a[:, None] * np.ones_like(s)
            return np.exp(-2.0 * (base[:, None] + _gl_partial(fk, left, s)))

        self.outer = self._cumulate(_gl_partial(outer, a, b))

    def _cumulate(self, cells):
        # Accumulate outward from y = 0 so large far-side values never cancel.
        o = self.origin
        right = np.cumsum(cells[o:])
        left = -np.cumsum(cells[:o][::-1])[::-1]
        return np.concatenate([left, [0.0], right])

    @staticmethod
    def _check(inner):
        if np.max(np.abs(2.0 * inner)) > EXP_LIMIT:
            raise QuadratureOverflow("exp(-2 int f) leaves the floating range on the y grid",
                                     max_exponent=float(np.max(np.abs(2.0 * inner))))

    def _locate(self, z):
        j = np.searchsorted(self.y, z, side="right") - 1
        return np.clip(j, 0, self.y.size - 1)

    def inner_at(self, z):
        z = np.asarray(z, dtype=float)
        j = self._locate(z)
        return self.inner[j] + _gl_partial(self.fk, self.y[j], z)

    def dphi(self, z):
        expo = -2.0 * self.inner_at(z)
        if np.any(np.abs(expo) > EXP_LIMIT):
            raise QuadratureOverflow("phi_y overflows", max_exponent=float(np.max(np.abs(expo))))
        return self.factor * np.exp(expo)

    def phi(self, z):
        z = np.asarray(z, dtype=float)
        j = self._locate(z)
        yj = self.y[j]
        base = self.inner[j]

        def integrand(s):
            left = yj[..., None] * np.ones_like(s)
            return np.exp(-2.0 * (base[..., None] + _gl_partial(self.fk, left, s)))

        with np.errstate(over="raise"):
            try:
                part = _gl_partial(integrand, yj, z)
            except FloatingPointError:
                raise QuadratureOverflow("phi overflows at the requested points") from None
        return self.factor * (self.outer[j] + part) - self.drift


@dataclass(eq=False)
class PhiTransform:
    """The increasing space-time map ``phi(t, y)`` on ``t_grid``.

    ``time_factor`` and ``drift_term`` are ``E(t)`` and
    ``int_0^t E(u) h(u, 0) du`` at the grid times. Values at any ``y`` come
    from the cumulative node integrals plus one nested Gauss-Legendre panel,
    and ``phi_y`` from the closed exponential, not from differencing.
    """

    f: Callable
    h: Callable
    t_grid: np.ndarray
    y_grid: np.ndarray
    time_factor: np.ndarray
    drift_term: np.ndarray
    residual: Optional[PdeResidual] = None
    _slices: dict = field(default_factory=dict, repr=False)

    @property
    def T(self) -> float:
        return float(self.t_grid[-1])

    def _k(self, t) -> int:
        t = float(t)
        k = int(np.argmin(np.abs(self.t_grid - t)))
        if abs(self.t_grid[k] - t) > 1e-9 * max(1.0, self.T):
            raise InvalidParameters(f"time {t} is not on the transform's grid")
        return k

    def _slice(self, k: int) -> _Slice:
        if k not in self._slices:
            tk = float(self.t_grid[k])
            origin = int(np.searchsorted(self.y_grid, 0.0))
            self._slices[k] = _Slice(lambda y: self.f(tk, y), self.y_grid, origin,
                                     float(self.time_factor[k]), float(self.drift_term[k]))
        return self._slices[k]

    def phi(self, t, y):
        return self._slice(self._k(t)).phi(y)

    def phi_y(self, t, y):
        return self._slice(self._k(t)).dphi(y)

    @property
    def values(self) -> np.ndarray:
        """``phi`` on the full ``(t_grid, y_grid)`` table."""
        return np.stack([self.phi(t, self.y_grid) for t in self.t_grid])

    @property
    def dvalues(self) -> np.ndarray:
        return np.stack([self.phi_y(t, self.y_grid) for t in self.t_grid])

    def inverse(self, t, v: float, bracket: float = 1.0) -> float:
        """Solve ``phi(t, y) = v``; bracketing by doubling, then Brent and a Newton polish."""
        k = self._k(t)
        sl = self._slice(k)

        def g(y):
            return float(sl.phi(np.array(y))) - v

        lo, hi = -bracket, bracket
        try:
            for _ in range(60):
                glo, ghi = g(lo), g(hi)
                if glo <= 0 <= ghi:
                    break
                if glo > 0:
                    lo *= 2
                if ghi < 0:
                    hi *= 2
            else:
                raise RootBracketFailure("could not bracket the inverse", target=v)
        except QuadratureOverflow as exc:
            raise RootBracketFailure("bracketing left the representable range", target=v) from exc
        if glo == 0:
            return lo
        if ghi == 0:
            return hi
        y = brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        for _ in range(3):
            step = g(y) / float(sl.dphi(np.array(y)))
            if not math.isfinite(step) or step == 0.0:
                break
            y -= step
        if abs(g(y)) > 1e-10 * (1 + abs(v)):
            raise RootBracketFailure("inverse residual above tolerance",
                                     residual=abs(g(y)), target=v)
        return y


def _time_integrals(f, h, t):
    """``E(t_k)`` and ``int_0^{t_k} E(u) h(u, 0) du`` by nested Gauss-Legendre."""

    def rate(s):
        hy = (h(s, FD_STEP) - h(s, -FD_STEP)) / (2 * FD_STEP)
        return 2 * f(s, 0.0) * h(s, 0.0) - hy

    a, b = t[:-1], t[1:]
    cum = np.concatenate([[0.0], np.cumsum(_gl_partial(rate, a, b))])
    if np.max(np.abs(cum)) > EXP_LIMIT:
        raise QuadratureOverflow("time factor leaves the floating range")

    def weighted(s):
        left = a[:, None] * np.ones_like(s)
        return np.exp(cum[:-1, None] + _gl_partial(rate, left, s)) * h(s, 0.0)

    drift = np.concatenate([[0.0], np.cumsum(_gl_partial(weighted, a, b))])
    return np.exp(cum), drift


def build_phi(f, h=0.0, t_grid=None, y_grid=None, T: float = 1.0,
              check: bool = True) -> PhiTransform:
    """Build the transform for ``g = f ||z||^2 + h``.

    Parameters
    ----------
    f, h
        Vectorized callables of ``(t, y)`` or constants.
    t_grid
        Increasing times starting at 0; defaults to 101 points on ``[0, T]``.
    y_grid
        Increasing y nodes; defaults to ``[-60, 60]`` with spacing 0.025.
        Zero is inserted if missing.
    check
        Evaluate :func:`pde_residual` and warn when it exceeds its threshold.
    """
    f, h = _as_field(f), _as_field(h)
    t = np.linspace(0.0, T, 101) if t_grid is None else np.asarray(t_grid, dtype=float)
    y = np.linspace(-60.0, 60.0, 4801) if y_grid is None else np.asarray(y_grid, dtype=float)
    if t[0] != 0.0 or np.any(np.diff(t) <= 0):
        raise InvalidParameters("t_grid must start at 0 and increase")
    if np.any(np.diff(y) <= 0):
        raise InvalidParameters("y_grid must increase")
    if not np.any(y == 0.0):
        y = np.sort(np.append(y, 0.0))
    factor, drift = _time_integrals(f, h, t)
    residual = None
    if check and t.size >= 3:
        ry = np.linspace(max(y[0], -10.0), min(y[-1], 10.0), 401)
        residual = pde_residual(f, h, np.linspace(t[0], t[-1], max(t.size, 3)), ry)
        if not residual.ok:
            warnings.warn("driver does not satisfy the law-invariance PDE on the grid "
                          f"(residual {residual.max_abs:.3g} > {residual.threshold:.3g})",
                          RuntimeWarning, stacklevel=2)
    return PhiTransform(f, h, t, y, factor, drift, residual)


def phi_for_driver(driver: ZSeparableDriver, t_steps: int = 100, y_grid=None,
                   check: bool = True) -> PhiTransform:
    return build_phi(driver.f, driver.h, np.linspace(0.0, driver.T, t_steps + 1), y_grid,
                     check=check)


# ---------------------------------------------------------------------------
# Pricing


def _admissible(mu, alpha: float, beta: float, T: float) -> float:
    rate = 2.0 * SAFETY * alpha * math.exp(SAFETY * beta * T)

    def integrand(x):
        with np.errstate(over="ignore"):
            return np.exp(rate * np.abs(x))

    try:
        value = expect(mu, integrand)
    except NonIntegrable as exc:
        raise InadmissibleDistribution("exponential moment required for law invariance diverges",
                                       rate=rate) from exc
    if not math.isfinite(value):
        raise InadmissibleDistribution("exponential moment required for law invariance diverges",
                                       rate=rate)
    return value


def law_invariant_expectation(phi: PhiTransform, mu, alpha_bound: Optional[float] = None,
                              beta_bound: Optional[float] = None) -> float:
    """``y0`` with ``phi(0, y0) = E[phi(T, mu)]``.

    When the driver bounds are given, ``E[exp(2 a e^{b T} |mu|)]`` is checked
    first (``a``, ``b`` inflated by 5%) and :class:`InadmissibleDistribution`
    raised if it diverges.
    """
    if alpha_bound is not None:
        _admissible(mu, alpha_bound, beta_bound or 0.0, phi.T)
    try:
        v = expect(mu, lambda x: phi.phi(phi.T, x))
    except QuadratureOverflow as exc:
        raise InadmissibleDistribution("phi(T, mu) is not integrable") from exc
    except NonIntegrable as exc:
        raise InadmissibleDistribution("phi(T, mu) is not integrable") from exc
    return phi.inverse(0.0, v)


# ---------------------------------------------------------------------------
# Monte-Carlo invariance probe


def default_constructions(T: float, n_steps: int):
    """Weights for ``B_T``, ``B_{T/2}`` and ``-B_T`` based payoffs."""
    from .efficiency import GaussianPayoff

    half = np.zeros(n_steps)
    half[: n_steps // 2] = 1.0
    return [
        ("B_T", lambda mu: GaussianPayoff(mu, np.ones(n_steps))),
        ("B_T/2", lambda mu: GaussianPayoff(mu, half)),
        ("-B_T", lambda mu: GaussianPayoff(mu, -np.ones(n_steps))),
    ]


@dataclass
class InvarianceReport:
    names: list
    values: list
    std_errs: list
    spread: float
    max_std_err: float
    consistent: bool

    def to_dict(self) -> dict:
        return {"constructions": self.names, "values": self.values, "std_errs": self.std_errs,
                "spread": self.spread, "max_std_err": self.max_std_err,
                "verdict": ("consistent with invariance" if self.consistent
                            else "spread exceeds Monte-Carlo error")}


def invariance_probe(driver, mu, paths: PathEnsemble, constructions: Optional[Sequence] = None,
                     basis_degree: int = 4, ks_level: float = 0.01) -> InvarianceReport:
    """Price several payoffs with the same law and compare.

    ``constructions`` is a list of ``(name, builder)`` where ``builder(mu)``
    returns a payoff descriptor. Every sample set is KS-tested against ``mu``
    first; :class:`LawMismatch` is raised when a test rejects at
    ``ks_level``.
    """
    if constructions is None:
        constructions = default_constructions(paths.T, paths.n_steps)
    names, values, ses = [], [], []
    for name, build in constructions:
        payoff = build(mu)
        x = payoff.samples(paths)
        if mu.atoms() is None:
            pval = stats.kstest(x, lambda v: np.asarray(mu.cdf(v), dtype=float)).pvalue
            if pval < ks_level:
                raise LawMismatch(f"construction {name!r} does not have the requested law",
                                  p_value=float(pval))
        sol = solve_lsmc(driver, x, paths, basis_degree, regressors=payoff.regressors(paths))
        names.append(name)
        values.append(sol.y0)
        ses.append(sol.std_err)
    spread = float(max(values) - min(values))
    mse = float(max(ses))
    return InvarianceReport(names, values, ses, spread, mse, bool(spread <= 3 * mse))
