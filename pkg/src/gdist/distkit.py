"""Distributions as quantile functions.

Every law exposes the same small protocol:

``quantile(p)``
    right-continuous inverse CDF, vectorized over ``p in (0, 1)``;
``quantile_z(z)``
    ``quantile(Phi(z))``, evaluated without round-off in the tails where the
    law allows it;
``cdf(x)``;
``jumps()``
    probability levels where the quantile is discontinuous;
``atoms()``
    ``(values, weights)`` for purely discrete laws, ``None`` otherwise.

:func:`expect` and :func:`hl_integral` integrate in the probit variable
``z = Phi^{-1}(p)`` (see :mod:`gdist._quadrature`), which keeps the
singular ends of ``p in (0, 1)`` under control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from ._quadrature import EPS_CLIP, integrate_probit
from .errors import AtomDetected, InvalidParameters

__all__ = [
    "std_normal_cdf",
    "QuantileFunction",
    "Dirac",
    "TwoPoint",
    "Normal",
    "Lognormal",
    "Empirical",
    "Tabulated",
    "chebyshev_levels",
    "expect",
    "hl_integral",
    "anticomonotone_payoff",
    "law_from_dict",
    "law_to_dict",
]


def std_normal_cdf(x):
    """Standard normal distribution function (scalar or array)."""
    out = ndtr(np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def chebyshev_levels(n: int = 2048) -> np.ndarray:
    """Chebyshev-spaced probability levels in (0, 1), dense near both ends."""
    k = np.arange(n)
    return np.sort(0.5 * (1.0 - np.cos(np.pi * (k + 0.5) / n)))


class _Law:
    """Shared defaults for the quantile protocol."""

    def quantile_z(self, z):
        return self.quantile(ndtr(np.asarray(z, dtype=float)))

    def jumps(self) -> np.ndarray:
        return np.empty(0)

    def atoms(self):
        return None

    def mean(self) -> float:
        return expect(self, lambda x: x)

    def to_quantile(self, n: int = 2048) -> "QuantileFunction":
        p = chebyshev_levels(n)
        return QuantileFunction(p, self.quantile(p), interpolation="linear")


# ---------------------------------------------------------------------------
# Tabulated quantile functions


@dataclass(frozen=True, eq=False)
class QuantileFunction(_Law):
    """Quantile function tabulated at knots ``(p_i, x_i)``.

    ``interpolation="linear"`` joins knots linearly in ``p``;
    ``"constant"`` holds ``x_i`` on ``[p_i, p_{i+1})`` (right-continuous).
    Beyond the outer knots ``tails`` decides: ``"flat"``, ``"normal"`` (linear
    in the probit variable), ``"lognormal"`` (same, in ``log x``), or
    ``("bounded", lo, hi)``.
    """

    p: np.ndarray
    x: np.ndarray
    interpolation: str = "linear"
    tails: object = "flat"

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if p.ndim != 1 or p.shape != x.shape or p.size == 0:
            raise InvalidParameters("knots must be two equal-length 1-D sequences")
        if np.any((p <= 0) | (p >= 1)):
            raise InvalidParameters("knot probabilities must lie in (0, 1)")
        if np.any(np.diff(p) <= 0):
            raise InvalidParameters("knot probabilities must be strictly increasing")
        if not np.all(np.isfinite(x)):
            raise InvalidParameters("knot values must be finite")
        if np.any(np.diff(x) < 0):
            raise InvalidParameters("knot values must be nondecreasing")
        if self.interpolation not in ("linear", "constant"):
            raise InvalidParameters(f"unknown interpolation {self.interpolation!r}")
        tails = self.tails
        if isinstance(tails, (list, tuple)):
            if len(tails) != 3 or tails[0] != "bounded":
                raise InvalidParameters("bounded tails are ('bounded', lo, hi)")
            lo, hi = float(tails[1]), float(tails[2])
            if not lo <= x[0] or not x[-1] <= hi:
                raise InvalidParameters("bounded tails must enclose the knot values")
            tails = ("bounded", lo, hi)
        elif tails not in ("flat", "normal", "lognormal"):
            raise InvalidParameters(f"unknown tail spec {tails!r}")
        if tails in ("normal", "lognormal") and p.size < 2:
            raise InvalidParameters("parametric tails need at least two knots")
        if tails == "lognormal" and x[0] <= 0:
            raise InvalidParameters("lognormal tails need positive knot values")
        p.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "tails", tails)

    @property
    def bounds(self):
        if isinstance(self.tails, tuple):
            return self.tails[1], self.tails[2]
        if self.tails == "flat":
            return float(self.x[0]), float(self.x[-1])
        if self.tails == "lognormal":
            return 0.0, math.inf
        return -math.inf, math.inf

    def _tail_slopes(self):
        z = ndtri(self.p)
        if self.tails == "lognormal":
            lx = np.log(self.x)
            return z, lx, (lx[1] - lx[0]) / (z[1] - z[0]), (lx[-1] - lx[-2]) / (z[-1] - z[-2])
        return z, self.x, (self.x[1] - self.x[0]) / (z[1] - z[0]), (self.x[-1] - self.x[-2]) / (z[-1] - z[-2])

    def _body(self, p):
        if self.interpolation == "linear":
            return np.interp(p, self.p, self.x)
        idx = np.searchsorted(self.p, p, side="right") - 1
        return self.x[np.clip(idx, 0, self.x.size - 1)]

    def _eval(self, p, z):
        out = self._body(p)
        low = p < self.p[0]
        high = p > self.p[-1]
        if self.interpolation == "constant":
            high = np.zeros_like(high)
        if not (np.any(low) or np.any(high)):
            return out
        tails = self.tails
        if tails == "flat":
            return out
        if isinstance(tails, tuple):
            lo, hi = tails[1], tails[2]
            if self.interpolation == "constant":
                out = np.where(low, lo, out)
            else:
                out = np.where(low, lo + (self.x[0] - lo) * p / self.p[0], out)
                frac = (p - self.p[-1]) / (1.0 - self.p[-1])
                out = np.where(high, self.x[-1] + (hi - self.x[-1]) * frac, out)
            return out
        zk, vk, s_lo, s_hi = self._tail_slopes()
        if z is None:
            with np.errstate(divide="ignore"):
                z = ndtri(p)
        t_lo = vk[0] + s_lo * (z - zk[0])
        t_hi = vk[-1] + s_hi * (z - zk[-1])
        if tails == "lognormal":
            with np.errstate(over="ignore"):
                t_lo, t_hi = np.exp(t_lo), np.exp(t_hi)
        out = np.where(low, t_lo, out)
        return np.where(high, t_hi, out)

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        return self._eval(p, None)

    def quantile_z(self, z):
        z = np.asarray(z, dtype=float)
        return self._eval(ndtr(z), z)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        # F(x) = sup{p : Q(p) <= x}, found by bisection on the monotone quantile.
        lo = np.zeros_like(x)
        hi = np.ones_like(x)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = self.quantile(mid) <= x
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return lo

    def jumps(self):
        if self.interpolation == "constant":
            return self.p[1:] if not isinstance(self.tails, tuple) else self.p.copy()
        return np.empty(0)

    def atoms(self):
        if self.interpolation != "constant":
            return None
        if isinstance(self.tails, tuple):
            values = np.concatenate([[self.tails[1]], self.x])
            edges = np.concatenate([[0.0], self.p, [1.0]])
        else:
            values = self.x
            edges = np.concatenate([[0.0], self.p[1:], [1.0]])
        return values, np.diff(edges), edges

    def to_quantile(self, n: int = 2048):
        return self


# ---------------------------------------------------------------------------
# Parametric and discrete laws


class _Discrete(_Law):
    """Finite law given by sorted atoms and weights."""

    _values: np.ndarray
    _weights: np.ndarray

    def _cum(self):
        return np.cumsum(self._weights)

    def atoms(self):
        edges = np.concatenate([[0.0], self._cum()])
        edges[-1] = 1.0
        return self._values, self._weights, edges

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        idx = np.searchsorted(self._cum(), p, side="right")
        return self._values[np.clip(idx, 0, self._values.size - 1)]

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self._values, x, side="right")
        cum = np.concatenate([[0.0], self._cum()])
        return np.minimum(cum[idx], 1.0)

    def jumps(self):
        return self._cum()[:-1]

    def mean(self):
        return math.fsum((self._values * self._weights).tolist())

    def to_quantile(self, n: int = 2048):
        v, w, edges = self.atoms()
        inner = edges[1:-1]
        if inner.size == 0:
            return QuantileFunction([0.5], [v[0]], "constant", ("bounded", v[0], v[0]))
        return QuantileFunction(inner, v[1:], "constant", ("bounded", v[0], v[-1]))


@dataclass(frozen=True)
class Dirac(_Discrete):
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise InvalidParameters("Dirac location must be finite")
        object.__setattr__(self, "_values", np.array([float(self.value)]))
        object.__setattr__(self, "_weights", np.array([1.0]))


@dataclass(frozen=True)
class TwoPoint(_Discrete):
    low: float
    high: float
    p_high: float

    def __post_init__(self):
        if not 0.0 < self.p_high < 1.0:
            raise InvalidParameters("p_high must lie in (0, 1)")
        if not self.low <= self.high:
            raise InvalidParameters("two-point law needs low <= high")
        object.__setattr__(self, "_values", np.array([float(self.low), float(self.high)]))
        object.__setattr__(self, "_weights", np.array([1.0 - self.p_high, self.p_high]))


@dataclass(frozen=True, eq=False)
class Empirical(_Discrete):
    """Equally weighted sample; the quantile picks order statistics."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.sort(np.asarray(self.samples, dtype=float).ravel())
        if s.size == 0 or not np.all(np.isfinite(s)):
            raise InvalidParameters("empirical law needs finite samples")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "_values", s)
        object.__setattr__(self, "_weights", np.full(s.size, 1.0 / s.size))

    def _cum(self):
        return np.arange(1, self.samples.size + 1) / self.samples.size


@dataclass(frozen=True)
class Normal(_Law):
    loc: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidParameters("normal law needs std > 0")

    def quantile(self, p):
        return self.loc + self.scale * ndtri(np.asarray(p, dtype=float))

    def quantile_z(self, z):
        return self.loc + self.scale * np.asarray(z, dtype=float)

    def cdf(self, x):
        return ndtr((np.asarray(x, dtype=float) - self.loc) / self.scale)

    def sf(self, x):
        return ndtr((self.loc - np.asarray(x, dtype=float)) / self.scale)

    def mean(self):
        return float(self.loc)

    def to_quantile(self, n: int = 2048):
        p = chebyshev_levels(n)
        return QuantileFunction(p, self.quantile(p), "linear", "normal")


@dataclass(frozen=True)
class Lognormal(_Law):
    """Law of ``exp(N(log_mean, log_std^2))``."""

    log_mean: float
    log_std: float

    def __post_init__(self):
        if not self.log_std > 0:
            raise InvalidParameters("lognormal law needs log_std > 0")

    def quantile(self, p):
        return np.exp(self.log_mean + self.log_std * ndtri(np.asarray(p, dtype=float)))

    def quantile_z(self, z):
        with np.errstate(over="ignore"):
            return np.exp(self.log_mean + self.log_std * np.asarray(z, dtype=float))

    def probit(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return (np.log(x) - self.log_mean) / self.log_std

    def cdf(self, x):
        return ndtr(self.probit(x))

    def sf(self, x):
        return ndtr(-self.probit(x))

    def mean(self):
        return math.exp(self.log_mean + 0.5 * self.log_std**2)

    def to_quantile(self, n: int = 2048):
        p = chebyshev_levels(n)
        return QuantileFunction(p, self.quantile(p), "linear", "lognormal")


@dataclass(frozen=True, eq=False)
class Tabulated(_Law):
    qf: QuantileFunction

    def quantile(self, p):
        return self.qf.quantile(p)

    def quantile_z(self, z):
        return self.qf.quantile_z(z)

    def cdf(self, x):
        return self.qf.cdf(x)

    def jumps(self):
        return self.qf.jumps()

    def atoms(self):
        return self.qf.atoms()

    def to_quantile(self, n: int = 2048):
        return self.qf


# ---------------------------------------------------------------------------
# Integrals


def _z_breaks(law, flip=False):
    jumps = np.asarray(law.jumps(), dtype=float)
    jumps = jumps[(jumps > 0) & (jumps < 1)]
    z = ndtri(jumps)
    return (-z if flip else z).tolist()


def _linear_knot_breaks(law):
    qf = law.qf if isinstance(law, Tabulated) else law
    if isinstance(qf, QuantileFunction) and qf.interpolation == "linear":
        return ndtri(qf.p).tolist()
    return []


def expect(law, f: Callable, eps: float = EPS_CLIP, rtol: float = 1e-12) -> float:
    """``E[f(mu)] = int_0^1 f(mu^{-1}(p)) dp``.

    Discrete laws are summed exactly; everything else goes through adaptive
    Gauss-Legendre in the probit variable. Raises :class:`NonIntegrable` when
    the quadrature does not settle.
    """
    atoms = law.atoms()
    if atoms is not None:
        values, weights = atoms[0], atoms[1]
        fx = np.asarray(f(values), dtype=float) * np.ones_like(values)
        return math.fsum((fx * weights).tolist())
    breaks = _z_breaks(law) + _linear_knot_breaks(law)
    return integrate_probit(lambda z: f(law.quantile_z(z)), breaks=breaks, eps=eps, rtol=rtol)


def _discrete_hl(mu_atoms, eta_atoms) -> float:
    xv, xw = mu_atoms[0], mu_atoms[1]
    ev, ew = eta_atoms[0][::-1], eta_atoms[1][::-1]
    # Exact rational breakpoints so equal weights give equal segment lengths.
    cx = np.cumsum([Fraction(float(w)) for w in xw]).tolist()
    ce = np.cumsum([Fraction(float(w)) for w in ew]).tolist()
    end = min(cx[-1], ce[-1])
    cuts = sorted({c for c in cx + ce if c < end} | {end})
    terms = []
    prev = Fraction(0)
    i = j = 0
    for c in cuts:
        while cx[i] <= prev:
            i += 1
        while ce[j] <= prev:
            j += 1
        length = float(c - prev)
        terms.append((float(ev[j]) * float(xv[i])) * length)
        prev = c
    return math.fsum(terms)


def hl_integral(mu, eta, eps: float = EPS_CLIP, rtol: float = 1e-12) -> float:
    """Anti-comonotonic product integral ``int_0^1 eta^{-1}(1-p) mu^{-1}(p) dp``.

    This is the smallest value of ``E[eta X]`` over all couplings with
    ``X ~ mu`` (Hardy-Littlewood).
    """
    ma, ea = mu.atoms(), eta.atoms()
    if ma is not None and ea is not None:
        return _discrete_hl(ma, ea)
    if ma is not None and len(ma[0]) == 1:
        return float(ma[0][0]) * expect(eta, lambda x: x, eps=eps, rtol=rtol)
    if ea is not None and len(ea[0]) == 1:
        return float(ea[0][0]) * expect(mu, lambda x: x, eps=eps, rtol=rtol)
    breaks = (_z_breaks(mu) + _z_breaks(eta, flip=True) + _linear_knot_breaks(mu)
              + [-b for b in _linear_knot_breaks(eta)])

    def g(z):
        return mu.quantile_z(z) * eta.quantile_z(-z)

    return integrate_probit(g, breaks=breaks, eps=eps, rtol=rtol)


def anticomonotone_payoff(mu, eta_samples, eta_cdf: Callable, eta_sf: Optional[Callable] = None,
                          atom_tol: float = 1e-3) -> np.ndarray:
    """Samplewise ``mu^{-1}(1 - F_eta(eta))``.

    ``eta_sf`` (survival function) is used instead of ``1 - eta_cdf`` when
    given, which keeps upper-tail precision. Raises :class:`AtomDetected`
    when tied samples carry at least ``atom_tol`` of the mass, unless ``mu``
    is a point mass.
    """
    eta = np.asarray(eta_samples, dtype=float)
    atoms = mu.atoms()
    if atoms is not None and len(atoms[0]) == 1:
        return np.full(eta.shape, float(atoms[0][0]))
    if eta.size > 1:
        s = np.sort(eta.ravel())
        run_starts = np.flatnonzero(np.concatenate([[True], s[1:] != s[:-1]]))
        longest = np.max(np.diff(np.concatenate([run_starts, [s.size]])))
        if longest > 1 and longest / s.size >= atom_tol:
            raise AtomDetected(
                "the pricing variable has an atom; the efficient payoff is not unique",
                atom_mass=float(longest / s.size),
            )
    upper = eta_sf(eta) if eta_sf is not None else 1.0 - np.asarray(eta_cdf(eta), dtype=float)
    return mu.quantile_z(ndtri(np.asarray(upper, dtype=float)))


# ---------------------------------------------------------------------------
# JSON round trip


def law_from_dict(spec: dict):
    kind = spec["kind"]
    if kind == "dirac":
        return Dirac(float(spec["value"]))
    if kind == "two_point":
        return TwoPoint(float(spec["low"]), float(spec["high"]), float(spec["p_high"]))
    if kind == "normal":
        return Normal(float(spec["mean"]), float(spec["std"]))
    if kind == "lognormal":
        return Lognormal(float(spec["log_mean"]), float(spec["log_std"]))
    if kind == "empirical":
        return Empirical(np.asarray(spec["samples"], dtype=float))
    if kind == "tabulated":
        knots = np.asarray(spec["knots"], dtype=float)
        tails = spec.get("tails", "flat")
        if isinstance(tails, dict):
            tails = ("bounded", float(tails["min"]), float(tails["max"]))
        qf = QuantileFunction(knots[:, 0], knots[:, 1], spec.get("interpolation", "linear"), tails)
        return Tabulated(qf)
    raise InvalidParameters(f"unknown distribution kind {kind!r}")


def law_to_dict(law) -> dict:
    if isinstance(law, Dirac):
        return {"kind": "dirac", "value": law.value}
    if isinstance(law, TwoPoint):
        return {"kind": "two_point", "low": law.low, "high": law.high, "p_high": law.p_high}
    if isinstance(law, Normal):
        return {"kind": "normal", "mean": law.loc, "std": law.scale}
    if isinstance(law, Lognormal):
        return {"kind": "lognormal", "log_mean": law.log_mean, "log_std": law.log_std}
    if isinstance(law, Empirical):
        return {"kind": "empirical", "samples": law.samples.tolist()}
    qf = law.qf if isinstance(law, Tabulated) else law
    tails = qf.tails
    if isinstance(tails, tuple):
        tails = {"min": tails[1], "max": tails[2]}
    return {"kind": "tabulated", "knots": np.column_stack([qf.p, qf.x]).tolist(),
            "interpolation": qf.interpolation, "tails": tails}
