"""BSDE drivers ``g(t, y, z)`` and deterministic-coefficient markets.

Time-dependent coefficients are piecewise constant on a uniform grid of
``steps`` intervals over ``[0, T]``: the value stored at node ``k`` applies on
``[t_k, t_{k+1})``. Drivers are evaluated on whole path cross-sections at
once: ``y`` has shape ``(N,)`` and ``z`` shape ``(N, n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .distkit import Dirac, Lognormal
from .errors import DimensionMismatch, InvalidParameters

__all__ = [
    "TimeGrid",
    "MarketParams",
    "ZeroDriver",
    "LinearDriver",
    "TwoRateDriver",
    "SublinearDriver",
    "ZSeparableDriver",
    "TabulatedField",
    "constant_f",
    "example44",
    "StatePriceDensity",
    "density_law",
    "sample_density",
    "eval_driver",
]

COND_CAP = 1e10
COEF_BOUND = 1e6


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise InvalidParameters("horizon T must be positive")
        if self.steps < 1:
            raise InvalidParameters("need at least one time step")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    def index(self, t):
        """Interval index holding time ``t`` (the last interval is closed)."""
        k = np.floor(np.asarray(t, dtype=float) / self.dt + 1e-9).astype(int)
        return np.clip(k, 0, self.steps - 1)


def _per_node(value, steps, shape=()):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0 or arr.shape == shape:
        arr = np.broadcast_to(arr, (steps,) + shape)
    elif shape == (1,) and arr.shape == (steps,):
        arr = arr[:, None]
    if arr.shape != (steps,) + shape:
        raise DimensionMismatch(
            f"coefficient has shape {arr.shape}, expected {(steps,) + shape} or {shape}")
    if not np.all(np.isfinite(arr)) or np.any(np.abs(arr) > COEF_BOUND):
        raise InvalidParameters("coefficients must be finite and bounded")
    arr = np.array(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MarketParams:
    """Deposit rate ``r``, loan rate ``R``, volatility ``sigma`` and drift ``b``.

    The risk premium ``theta = sigma^{-1}(b - r 1)`` is derived, never stored
    independently.
    """

    grid: TimeGrid
    n: int
    r: np.ndarray
    R: np.ndarray
    sigma: np.ndarray
    b: np.ndarray
    theta: np.ndarray = field(init=False)
    sigma_inv_one: np.ndarray = field(init=False)

    def __post_init__(self):
        steps, n = self.grid.steps, self.n
        r = _per_node(self.r, steps)
        R = _per_node(self.R, steps)
        sigma = _per_node(self.sigma, steps, (n, n))
        b = _per_node(self.b, steps, (n,))
        if np.any(R < r):
            raise InvalidParameters("loan rate must be at least the deposit rate")
        cond = np.linalg.cond(sigma)
        if not np.all(cond < COND_CAP):
            raise InvalidParameters("volatility matrix is singular or badly conditioned",
                                    max_condition=float(np.max(cond)))
        excess = b - r[:, None]
        theta = np.linalg.solve(sigma, excess[..., None])[..., 0]
        s1 = np.linalg.solve(sigma, np.ones((steps, n, 1)))[..., 0]
        for name, arr in (("r", r), ("R", R), ("sigma", sigma), ("b", b)):
            object.__setattr__(self, name, arr)
        theta.setflags(write=False)
        s1.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "sigma_inv_one", s1)

    @classmethod
    def from_dict(cls, spec: dict) -> "MarketParams":
        grid = TimeGrid(float(spec["T"]), int(spec["steps"]))
        n = int(spec.get("n", 1))
        r = spec["r"]
        return cls(grid, n, r, spec.get("R", r), spec["sigma"], spec["b"])

    def to_dict(self) -> dict:
        return {"T": self.grid.T, "steps": self.grid.steps, "n": self.n,
                "r": self.r.tolist(), "R": self.R.tolist(),
                "sigma": self.sigma.tolist(), "b": self.b.tolist()}

    def lower_constant(self) -> float:
        """``sup_t 1'(sigma_t')^{-1} theta_t``."""
        return float(np.max(np.einsum("kn,kn->k", self.sigma_inv_one, self.theta)))

    def modified_theta(self) -> np.ndarray:
        return self.theta - (self.R - self.r)[:, None] * self.sigma_inv_one

    def upper_constant(self) -> float:
        """``inf_t 1'(sigma_t')^{-1}(theta_t - (R_t - r_t) sigma_t^{-1} 1)``."""
        return float(np.min(np.einsum("kn,kn->k", self.sigma_inv_one, self.modified_theta())))


# ---------------------------------------------------------------------------
# Drivers


def _check_z(z, n):
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[None, :] if z.shape[0] == n else z[:, None]
    if z.shape[-1] != n:
        raise DimensionMismatch(f"z has dimension {z.shape[-1]}, driver expects {n}")
    return z


class _Driver:
    n: int

    def __call__(self, t, y, z):
        return self.eval(t, y, z)


@dataclass(frozen=True)
class ZeroDriver(_Driver):
    n: int = 1

    def eval(self, t, y, z):
        z = _check_z(z, self.n)
        return np.zeros(np.broadcast_shapes(np.shape(y), z.shape[:-1]))


@dataclass(frozen=True, eq=False)
class LinearDriver(_Driver):
    """``g = r_t y + theta_t' z + delta_t``."""

    grid: TimeGrid
    n: int
    r: np.ndarray
    theta: np.ndarray
    delta: np.ndarray = 0.0

    def __post_init__(self):
        steps = self.grid.steps
        object.__setattr__(self, "r", _per_node(self.r, steps))
        object.__setattr__(self, "theta", _per_node(self.theta, steps, (self.n,)))
        object.__setattr__(self, "delta", _per_node(self.delta, steps))

    def eval(self, t, y, z):
        z = _check_z(z, self.n)
        k = int(self.grid.index(t))
        return self.r[k] * np.asarray(y, dtype=float) + z @ self.theta[k] + self.delta[k]

    def discounted_delta_integral(self) -> float:
        """``int_0^T delta_s exp(-int_0^s r) ds``, exact for piecewise-constant data."""
        dt = self.grid.dt
        disc = np.concatenate([[0.0], np.cumsum(self.r * dt)])[:-1]
        with np.errstate(invalid="ignore", divide="ignore"):
            factor = np.where(np.abs(self.r) * dt > 1e-12,
                              -np.expm1(-self.r * dt) / np.where(self.r == 0, 1, self.r),
                              dt * (1 - 0.5 * self.r * dt))
        return math.fsum((self.delta * np.exp(-disc) * factor).tolist())


@dataclass(frozen=True, eq=False)
class TwoRateDriver(_Driver):
    """``g = r y + theta' z - (R - r)(y - 1'(sigma')^{-1} z)^-``."""

    market: MarketParams

    @property
    def n(self):
        return self.market.n

    @property
    def grid(self):
        return self.market.grid

    def eval(self, t, y, z):
        z = _check_z(z, self.n)
        m = self.market
        k = int(m.grid.index(t))
        y = np.asarray(y, dtype=float)
        gap = y - z @ m.sigma_inv_one[k]
        return m.r[k] * y + z @ m.theta[k] - (m.R[k] - m.r[k]) * np.maximum(-gap, 0.0)

    def lower_linear(self) -> LinearDriver:
        """Deposit-rate linear driver; never above the two-rate driver."""
        m = self.market
        return LinearDriver(m.grid, m.n, m.r, m.theta)

    def upper_linear(self) -> LinearDriver:
        """Loan-rate linear driver ``r y + theta'z + (R-r)(y - 1'(sigma')^{-1}z)``."""
        m = self.market
        return LinearDriver(m.grid, m.n, m.R, m.modified_theta())


@dataclass(frozen=True, eq=False)
class SublinearDriver(_Driver):
    """``g = -A_t' z^+ - C_t' z^-`` with nonnegative ``A``, ``C``."""

    grid: TimeGrid
    n: int
    A: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        steps = self.grid.steps
        A = _per_node(self.A, steps, (self.n,))
        C = _per_node(self.C, steps, (self.n,))
        if np.any(A < 0) or np.any(C < 0):
            raise InvalidParameters("sublinear driver needs A, C >= 0 componentwise")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)

    @property
    def lipschitz(self) -> float:
        """A Lipschitz constant ``K`` with ``||A_t||, ||C_t|| <= K``."""
        return float(max(np.max(np.linalg.norm(self.A, axis=1)),
                         np.max(np.linalg.norm(self.C, axis=1))))

    def eval(self, t, y, z):
        z = _check_z(z, self.n)
        k = int(self.grid.index(t))
        # Factor out a power of two per row so that g(2^j z) == 2^j g(z) bit-for-bit.
        _, e = np.frexp(np.max(np.abs(z), axis=-1))
        scale = np.ldexp(1.0, e)
        u = z / scale[..., None]
        return -scale * (np.maximum(u, 0.0) @ self.A[k] + np.maximum(-u, 0.0) @ self.C[k])

    def zero_cost_measure(self) -> float:
        """Time measure of ``{t: A_t = 0} U {t: C_t = 0}``."""
        hit = np.all(self.A == 0, axis=1) | np.all(self.C == 0, axis=1)
        return float(np.sum(hit) * self.grid.dt)


@dataclass(frozen=True, eq=False)
class TabulatedField:
    """Function of ``(t, y)`` given on a rectangular grid, bilinear in between.

    Outside the grid the nearest edge value is used.
    """

    t: np.ndarray
    y: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        y = np.asarray(self.y, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.shape != (t.size, y.size):
            raise DimensionMismatch("field values must have shape (len(t), len(y))")
        if np.any(np.diff(t) <= 0) or np.any(np.diff(y) <= 0):
            raise InvalidParameters("field grids must be strictly increasing")
        for name, arr in (("t", t), ("y", y), ("values", v)):
            object.__setattr__(self, name, arr)

    def __call__(self, t, y):
        t, y = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(y, dtype=float))
        tc = np.clip(t, self.t[0], self.t[-1])
        yc = np.clip(y, self.y[0], self.y[-1])
        i = np.clip(np.searchsorted(self.t, tc, side="right") - 1, 0, max(self.t.size - 2, 0))
        j = np.clip(np.searchsorted(self.y, yc, side="right") - 1, 0, self.y.size - 2)
        if self.t.size == 1:
            wt = np.zeros_like(tc)
            i1 = i
        else:
            wt = (tc - self.t[i]) / (self.t[i + 1] - self.t[i])
            i1 = i + 1
        wy = (yc - self.y[j]) / (self.y[j + 1] - self.y[j])
        v = self.values
        return ((1 - wt) * ((1 - wy) * v[i, j] + wy * v[i, j + 1])
                + wt * ((1 - wy) * v[i1, j] + wy * v[i1, j + 1]))


def _zero_field(t, y):
    return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(y)))


@dataclass(frozen=True, eq=False)
class ZSeparableDriver(_Driver):
    """``g = f(t, y) ||z||^2 + h(t, y)``.

    ``f`` and ``h`` are vectorized callables of ``(t, y)`` (for instance a
    :class:`TabulatedField`). ``alpha_bound`` and ``beta_bound`` are the
    declared bounds ``sup|f| < alpha``, ``sup|h| <= beta``; they are checked on
    a sample grid at construction.
    """

    f: Callable
    h: Callable = _zero_field
    alpha_bound: float = 1.0
    beta_bound: float = 0.0
    T: float = 1.0
    n: int = 1
    label: str = "custom"

    def __post_init__(self):
        t = np.linspace(0.0, self.T, 41)[:, None]
        y = np.linspace(-20.0, 20.0, 401)[None, :]
        fv = np.asarray(self.f(t, y), dtype=float)
        hv = np.asarray(self.h(t, y), dtype=float)
        if not (np.all(np.isfinite(fv)) and np.all(np.isfinite(hv))):
            raise InvalidParameters("f and h must be finite")
        if not np.max(np.abs(fv)) < self.alpha_bound:
            raise InvalidParameters("sup|f| must be strictly below alpha_bound",
                                    sup_f=float(np.max(np.abs(fv))))
        if not np.max(np.abs(hv)) <= self.beta_bound:
            raise InvalidParameters("sup|h| must not exceed beta_bound",
                                    sup_h=float(np.max(np.abs(hv))))

    def eval(self, t, y, z):
        z = _check_z(z, self.n)
        y = np.asarray(y, dtype=float)
        return self.f(t, y) * np.einsum("...i,...i->...", z, z) + self.h(t, y)


def constant_f(k: float, T: float = 1.0, n: int = 1) -> ZSeparableDriver:
    """Time-invariant quadratic driver ``g = -k ||z||^2``.

    With ``phi(x) = int_0^x exp(2 k y) dy`` the g-expectation of any law is
    ``phi^{-1}(E[phi(mu)])``.
    """
    k = float(k)
    return ZSeparableDriver(lambda t, y: np.full(np.broadcast_shapes(np.shape(t), np.shape(y)), -k),
                            _zero_field, alpha_bound=abs(k) * 1.05 + 1e-12, beta_bound=0.0,
                            T=T, n=n, label=f"constant_f({k!r})")


def example44(T: float = 1.0, n: int = 1) -> ZSeparableDriver:
    """``g = -z^2/2``, whose g-expectation is ``log E[exp(X)]``."""
    d = constant_f(0.5, T, n)
    return ZSeparableDriver(d.f, d.h, d.alpha_bound, 0.0, T, n, "example44")


def eval_driver(d, t, y, z):
    return d.eval(t, y, z)


# ---------------------------------------------------------------------------
# State-price densities


@dataclass(frozen=True, eq=False)
class StatePriceDensity:
    """``rho_T = exp(-int (rate + |kernel|^2/2) ds - int kernel' dB)``.

    ``kind="standard"`` uses ``(r, theta)``; ``"modified"`` uses
    ``(R, theta - (R - r) sigma^{-1} 1)``.
    """

    kind: str
    grid: TimeGrid
    rate: np.ndarray
    kernel: np.ndarray
    log_mean: float = field(init=False)
    log_var: float = field(init=False)

    def __post_init__(self):
        dt = self.grid.dt
        sq = np.einsum("kn,kn->k", self.kernel, self.kernel)
        object.__setattr__(self, "log_mean", -math.fsum(((self.rate + 0.5 * sq) * dt).tolist()))
        object.__setattr__(self, "log_var", math.fsum((sq * dt).tolist()))

    @property
    def law(self):
        """Law of ``rho_T`` (a point mass when the kernel vanishes)."""
        if self.log_var <= 0.0:
            return Dirac(math.exp(self.log_mean))
        return Lognormal(self.log_mean, math.sqrt(self.log_var))

    def discount(self) -> float:
        """``E[rho_T] = exp(-int rate ds)``."""
        return math.exp(-math.fsum((self.rate * self.grid.dt).tolist()))

    def log_samples(self, paths, upto=None):
        """``log rho`` along each path at node ``upto`` (default: horizon)."""
        if paths.dim != self.kernel.shape[1]:
            raise DimensionMismatch("path dimension does not match the market")
        if abs(paths.T - self.grid.T) > 1e-12 * self.grid.T:
            raise DimensionMismatch("path horizon does not match the market")
        steps = paths.n_steps if upto is None else upto
        idx = self.grid.index(paths.times[:steps])
        ker = self.kernel[idx]
        drift = (self.rate[idx] + 0.5 * np.einsum("kn,kn->k", ker, ker)) * paths.dt
        ito = np.einsum("pkn,kn->p", paths.increments[:, :steps, :], ker)
        return -math.fsum(drift.tolist()) - ito

    def log_process(self, paths):
        """``log rho_{t_k}`` for every node, shape ``(n_paths, n_steps + 1)``."""
        idx = self.grid.index(paths.times[:-1])
        ker = self.kernel[idx]
        drift = (self.rate[idx] + 0.5 * np.einsum("kn,kn->k", ker, ker)) * paths.dt
        ito = np.einsum("pkn,kn->pk", paths.increments, ker)
        out = np.zeros((paths.n_paths, paths.n_steps + 1))
        out[:, 1:] = -np.cumsum(drift)[None, :] - np.cumsum(ito, axis=1)
        return out


def density_law(source, kind: str = "standard") -> StatePriceDensity:
    """State-price density for a market or a linear driver."""
    if isinstance(source, LinearDriver):
        if kind != "standard":
            raise InvalidParameters("a linear driver only has the standard density")
        return StatePriceDensity("standard", source.grid, source.r, source.theta)
    if isinstance(source, TwoRateDriver):
        source = source.market
    if kind == "standard":
        return StatePriceDensity(kind, source.grid, source.r, source.theta)
    if kind == "modified":
        return StatePriceDensity(kind, source.grid, source.R, source.modified_theta())
    raise InvalidParameters(f"unknown density kind {kind!r}")


def sample_density(spd: StatePriceDensity, paths) -> np.ndarray:
    """Per-path ``rho_T`` with the Ito integral taken at left points."""
    return np.exp(spd.log_samples(paths))
