"""Brownian paths, closed-form linear pricing and a least-squares Monte-Carlo BSDE solver.

The backward equation is ``dY = g(t, Y, Z) dt + Z' dB`` with ``Y_T = X``, so
for a driver that ignores ``y`` the initial value is ``E[X - int g dt]``.

The solver works on a uniform grid ``t_k = k dt``. At each step the
conditional expectations are least-squares projections on Hermite
polynomials of the (standardized) regressors at ``t_k``:

* ``Z_k = P_k[(Y_{k+1} - P_k Y_{k+1}) dB_k] / dt``;
* ``Y_k`` is the projection of ``X - sum_{j>k} g_j dt`` (a multi-step
  response) corrected once for the step-``k`` driver term.

Reductions use ``einsum`` and ``math.fsum`` so results do not depend on the
number of BLAS or worker threads.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np

from .drivers import LinearDriver, ZeroDriver
from .errors import (DimensionMismatch, InvalidParameters, NumericalFailure,
                     PreconditionViolated, RegressionSingular, ResourceLimit)

__all__ = [
    "PathEnsemble",
    "simulate_paths",
    "MCEstimate",
    "solve_linear_closed_form",
    "BsdeSolution",
    "solve_lsmc",
    "ComparisonReport",
    "comparison_probe",
    "default_threads",
]

MAX_ELEMENTS = 200_000_000
COND_CAP = 1e12
RIDGE = 1e-8
DEFAULT_BATCHES = 10
MIN_BATCH_PATHS = 500


def default_threads() -> int:
    env = os.environ.get("GDIST_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Brownian increments ``(n_paths, n_steps, dim)`` on a uniform grid over ``[0, T]``."""

    increments: np.ndarray
    T: float
    seed: int

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def dim(self) -> int:
        return self.increments.shape[2]

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    @cached_property
    def levels(self) -> np.ndarray:
        """``B_{t_k}`` for ``k = 0..n_steps``, shape ``(n_paths, n_steps + 1, dim)``."""
        out = np.zeros((self.n_paths, self.n_steps + 1, self.dim))
        np.cumsum(self.increments, axis=1, out=out[:, 1:, :])
        out.setflags(write=False)
        return out

    def level_at(self, t: float) -> np.ndarray:
        """``B_t`` at a grid time ``t``; raises if ``t`` is off the grid."""
        k = t / self.dt
        kr = int(round(k))
        if abs(k - kr) > 1e-9 or not 0 <= kr <= self.n_steps:
            raise InvalidParameters(f"time {t} is not a grid node")
        return self.levels[:, kr, :]

    def stopped_levels(self, t: float) -> np.ndarray:
        """Levels of ``B_{s ^ t}``, useful as regressors for payoffs depending on ``B_t``."""
        k = int(round(t / self.dt))
        lv = np.array(self.levels)
        lv[:, k + 1:, :] = lv[:, k:k + 1, :]
        return lv

    def negated(self) -> "PathEnsemble":
        """The antithetic ensemble ``-B``."""
        inc = -self.increments
        inc.setflags(write=False)
        return PathEnsemble(inc, self.T, self.seed)


def simulate_paths(n_paths: int, n_steps: int, dim: int, T: float, seed: int,
                   threads: Optional[int] = None) -> PathEnsemble:
    """Simulate Brownian increments with one counter-based stream per time step.

    Step ``k`` draws from ``Philox(key=(seed, k))``, so the ensemble depends
    only on ``seed`` and the shape, never on ``threads``.
    """
    if min(n_paths, n_steps, dim) < 1:
        raise InvalidParameters("path, step and dimension counts must be >= 1")
    if not (T > 0 and math.isfinite(T)):
        raise InvalidParameters("horizon T must be positive")
    total = n_paths * n_steps * dim
    if total > MAX_ELEMENTS:
        raise ResourceLimit("path ensemble exceeds the memory cap",
                            elements=total, cap=MAX_ELEMENTS)
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise InvalidParameters("seed must be an unsigned 64-bit integer")
    sq = math.sqrt(T / n_steps)
    inc = np.empty((n_paths, n_steps, dim))

    def fill(k):
        gen = np.random.Generator(np.random.Philox(key=np.array([seed, k], dtype=np.uint64)))
        inc[:, k, :] = gen.standard_normal((n_paths, dim)) * sq

    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1:
        for k in range(n_steps):
            fill(k)
    else:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(fill, range(n_steps)))
    inc.setflags(write=False)
    return PathEnsemble(inc, float(T), seed)


@dataclass(frozen=True)
class MCEstimate:
    value: float
    std_err: float


def _mean_se(x: np.ndarray) -> MCEstimate:
    n = x.size
    m = math.fsum(x.tolist()) / n
    if n < 2:
        return MCEstimate(m, 0.0)
    var = math.fsum(((x - m) ** 2).tolist()) / (n - 1)
    return MCEstimate(m, math.sqrt(var / n))


def solve_linear_closed_form(driver: LinearDriver, terminal_samples, density_samples) -> MCEstimate:
    """``E[rho_T X] - int_0^T delta_s exp(-int_0^s r) ds`` by Monte Carlo.

    ``density_samples`` are draws of ``rho_T`` on the same paths as the
    terminal samples (see :func:`gdist.drivers.sample_density`).
    """
    x = np.asarray(terminal_samples, dtype=float)
    rho = np.asarray(density_samples, dtype=float)
    if x.shape != rho.shape or x.ndim != 1:
        raise DimensionMismatch("terminal and density samples must be equal-length vectors")
    est = _mean_se(rho * x)
    return MCEstimate(est.value - driver.discounted_delta_integral(), est.std_err)


# ---------------------------------------------------------------------------
# Regression machinery


def _hermite_columns(u: np.ndarray, degree: int) -> list[np.ndarray]:
    """Probabilists' Hermite polynomials ``He_0..He_degree`` of ``u``."""
    cols = [np.ones_like(u)]
    if degree >= 1:
        cols.append(u)
    for n in range(1, degree):
        cols.append(u * cols[n] - n * cols[n - 1])
    return cols


def _design(state: np.ndarray, degree: int) -> np.ndarray:
    """Total-degree Hermite basis of the standardized non-constant state columns."""
    n = state.shape[0]
    mean = state.mean(axis=0)
    std = state.std(axis=0)
    live = std > 1e-12 * (1.0 + np.abs(mean))
    if not np.any(live):
        return np.ones((n, 1))
    u = (state[:, live] - mean[live]) / std[live]
    herm = [_hermite_columns(u[:, j], degree) for j in range(u.shape[1])]
    m = u.shape[1]
    terms = [np.ones(n)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(m), deg):
            powers = np.bincount(combo, minlength=m)
            col = np.ones(n)
            for j, pw in enumerate(powers):
                if pw:
                    col = col * herm[j][pw]
            terms.append(col)
    return np.stack(terms, axis=1)


class _Projector:
    """Least-squares projection onto the span of a design matrix."""

    def __init__(self, design: np.ndarray, step: int):
        self.design = design
        n, q = design.shape
        gram = np.einsum("pi,pj->ij", design, design) / n
        self.cond = float(np.linalg.cond(gram)) if q > 1 else 1.0
        if not math.isfinite(self.cond) or self.cond > COND_CAP:
            raise RegressionSingular("regression Gram matrix is ill-conditioned",
                                     step=step, condition=self.cond, cap=COND_CAP)
        ridge = np.full(q, RIDGE)
        ridge[0] = 0.0
        self.gram = gram + np.diag(ridge)

    def fit(self, responses: np.ndarray) -> np.ndarray:
        """Fitted values for each response column, shape like ``responses``."""
        r2 = responses.reshape(responses.shape[0], -1)
        rhs = np.einsum("pi,pk->ik", self.design, r2) / r2.shape[0]
        coef = np.linalg.solve(self.gram, rhs)
        return np.einsum("pi,ik->pk", self.design, coef).reshape(responses.shape)


@dataclass
class BsdeSolution:
    """Result of :func:`solve_lsmc`.

    ``y0`` is the estimate of ``Y_0`` and ``std_err`` its Monte-Carlo
    standard error. Node values are kept only when requested.
    """

    y0: float
    std_err: float
    y_nodes: Optional[np.ndarray] = None
    z_nodes: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)


def _as_regressors(paths: PathEnsemble, regressors) -> np.ndarray:
    if regressors is None:
        return paths.levels
    reg = np.asarray(regressors, dtype=float)
    if reg.ndim == 2:
        reg = reg[:, :, None]
    if reg.shape[:2] != (paths.n_paths, paths.n_steps + 1):
        raise DimensionMismatch("regressors must have shape (n_paths, n_steps + 1[, m])")
    return reg


def _backward(driver, x, inc, reg, dt, times, basis_degree, terminal_mean, retain):
    """One backward induction over the paths in ``x``; returns the estimate and node data."""
    n_paths, N, dim = inc.shape
    zero = isinstance(driver, ZeroDriver)
    acc = np.zeros_like(x)          # sum_{j>k} g_j dt
    y_next = x
    conds = []
    y_nodes = np.empty((n_paths, N + 1)) if retain else None
    z_nodes = np.empty((n_paths, N, dim)) if retain else None
    if retain:
        y_nodes[:, N] = x
    for k in range(N - 1, -1, -1):
        if zero:
            g = np.zeros_like(x)
            y_k = x
            z_k = np.zeros((n_paths, dim))
        else:
            proj = _Projector(_design(reg[:, k, :], basis_degree), k)
            conds.append(proj.cond)
            fitted = proj.fit(np.stack([y_next, x - acc], axis=1))
            centred = (y_next - fitted[:, 0])[:, None] * inc[:, k, :]
            z_k = proj.fit(centred) / dt
            y_chk = fitted[:, 1]
            t = float(times[k])
            y_pred = y_chk - driver.eval(t, y_chk, z_k) * dt
            y_k = y_chk - driver.eval(t, y_pred, z_k) * dt
            g = driver.eval(t, y_k, z_k)
            if not (np.all(np.isfinite(y_k)) and np.all(np.isfinite(z_k))
                    and np.all(np.isfinite(g))):
                raise NumericalFailure("non-finite values in backward induction",
                                       step=k, time=t)
        acc = acc + g * dt
        y_next = y_k
        if retain:
            y_nodes[:, k] = y_k
            z_nodes[:, k, :] = z_k
    if terminal_mean is None:
        est = _mean_se(x - acc)
    else:
        tail = _mean_se(acc)
        est = MCEstimate(float(terminal_mean) - tail.value, tail.std_err)
    return est, conds, y_nodes, z_nodes


def solve_lsmc(driver, terminal_samples, paths: PathEnsemble, basis_degree: int = 4,
               regressors=None, terminal_mean: Optional[float] = None,
               retain: bool = False, batches: int = DEFAULT_BATCHES) -> BsdeSolution:
    """Backward least-squares Monte-Carlo solution of the BSDE with driver ``driver``.

    Parameters
    ----------
    driver
        Any driver from :mod:`gdist.drivers` (``eval(t, y, z)`` vectorized).
    terminal_samples
        ``X`` per path; it must be a function of the regressor state at the
        horizon for the regressions to be consistent.
    paths
        The Brownian ensemble that generated ``X``.
    basis_degree
        Total degree of the Hermite basis.
    regressors
        Markov state per node, ``(n_paths, n_steps + 1, m)``. Defaults to the
        Brownian levels. Pass e.g. ``log rho_t`` when the payoff is a function
        of a time-inhomogeneous integral of ``B``.
    terminal_mean
        Known ``E[X]``; when given it replaces the sample mean of ``X`` (a
        control variate that leaves only the driver integral to Monte Carlo).
    retain
        Keep ``Y`` and ``Z`` at every node.
    batches
        Number of disjoint path blocks re-solved independently to estimate the
        standard error. The per-path sample variance misses the error of the
        fitted regression coefficients, which is of the same order; the spread
        of the block estimates captures both. The reported error is the larger
        of the two estimates. ``1`` keeps the per-path error only.

    Notes
    -----
    The point estimate always uses all paths; the blocks only feed the error.
    """
    if basis_degree < 1:
        raise InvalidParameters("basis_degree must be >= 1")
    if batches < 1:
        raise InvalidParameters("batches must be >= 1")
    x = np.asarray(terminal_samples, dtype=float)
    if x.shape != (paths.n_paths,):
        raise DimensionMismatch("one terminal sample per path is required")
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("terminal samples contain NaN or infinity")
    if getattr(driver, "n", paths.dim) != paths.dim:
        raise DimensionMismatch(f"driver dimension {driver.n} != path dimension {paths.dim}")
    reg = _as_regressors(paths, regressors)
    N, dt = paths.n_steps, paths.dt
    times = paths.times
    inc = paths.increments
    est, conds, y_nodes, z_nodes = _backward(driver, x, inc, reg, dt, times, basis_degree,
                                             terminal_mean, retain)
    std_err = est.std_err
    batch_se = None
    # regression-free drivers have no coefficient error; tiny blocks cannot be fitted
    block = x.size // batches
    if batches > 1 and not isinstance(driver, ZeroDriver) and block >= MIN_BATCH_PATHS:
        vals = []
        for b in range(batches):
            sl = slice(b * block, (b + 1) * block)
            sub, _, _, _ = _backward(driver, x[sl], inc[sl], reg[sl], dt, times,
                                     basis_degree, terminal_mean, False)
            vals.append(sub.value)
        # block estimates carry ``batches`` times the full-sample variance
        batch_se = float(np.std(vals, ddof=1)) / math.sqrt(batches)
        std_err = max(std_err, batch_se)
    diag = {
        "steps": N,
        "paths": paths.n_paths,
        "basis_degree": basis_degree,
        "max_condition": max(conds) if conds else 1.0,
        "control_variate": terminal_mean is not None,
        "std_err_per_path": est.std_err,
        "std_err_batch": batch_se,
        "batches": batches if batch_se is not None else 1,
    }
    return BsdeSolution(est.value, std_err, y_nodes, z_nodes, diag)


# ---------------------------------------------------------------------------
# Comparison principle


@dataclass(frozen=True)
class ComparisonReport:
    y0_first: float
    se_first: float
    y0_second: float
    se_second: float
    combined_se: float
    ordered: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _probe_points(n: int, T: float, seed: int, count: int = 512):
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 2**63], dtype=np.uint64)))
    t = rng.uniform(0.0, T, count)
    y = rng.normal(0.0, 3.0, count)
    z = rng.normal(0.0, 3.0, (count, n))
    return t, y, z


def comparison_probe(d1, d2, x1_samples, x2_samples, paths: PathEnsemble,
                     basis_degree: int = 4, regressors=None, tol: float = 1e-12) -> ComparisonReport:
    """Check ``Y^1_0 >= Y^2_0`` for ``X1 >= X2`` and ``g1 <= g2``.

    Dominance of the inputs is verified first (samplewise for ``X``, on
    random ``(t, y, z)`` probes for the drivers).
    """
    x1 = np.asarray(x1_samples, dtype=float)
    x2 = np.asarray(x2_samples, dtype=float)
    if x1.shape != x2.shape:
        raise DimensionMismatch("terminal sample vectors differ in length")
    if np.any(x1 < x2 - tol * (1 + np.abs(x2))):
        raise PreconditionViolated("first terminal value is not samplewise above the second",
                                   violations=int(np.sum(x1 < x2)))
    t, y, z = _probe_points(paths.dim, paths.T, paths.seed)
    dt_grid = paths.dt
    for ti, yi, zi in zip(t, y, z):
        ti = min(math.floor(ti / dt_grid) * dt_grid, paths.T - dt_grid)
        g1 = d1.eval(ti, np.array([yi]), zi[None, :])[0]
        g2 = d2.eval(ti, np.array([yi]), zi[None, :])[0]
        if g1 > g2 + tol * (1 + abs(g2)):
            raise PreconditionViolated("first driver exceeds the second on a probe",
                                       t=float(ti), y=float(yi), z=zi.tolist(),
                                       g1=float(g1), g2=float(g2))
    s1 = solve_lsmc(d1, x1, paths, basis_degree, regressors)
    s2 = solve_lsmc(d2, x2, paths, basis_degree, regressors)
    comb = math.hypot(s1.std_err, s2.std_err)
    return ComparisonReport(s1.y0, s1.std_err, s2.y0, s2.std_err, comb,
                            bool(s1.y0 >= s2.y0 - 3 * comb))
