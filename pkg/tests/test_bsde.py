from __future__ import annotations

import math

import numpy as np
import pytest

from gdist.bsde import (comparison_probe, simulate_paths, solve_linear_closed_form, solve_lsmc)
from gdist.distkit import Normal
from gdist.drivers import (LinearDriver, SublinearDriver, TimeGrid, ZeroDriver, constant_f,
                           density_law, sample_density)
from gdist.errors import (DimensionMismatch, InvalidParameters, PreconditionViolated, RegressionSingular,
                          ResourceLimit)


def test_paths_are_seed_deterministic_and_thread_independent():
    a = simulate_paths(1000, 16, 2, 1.0, seed=5, threads=1)
    b = simulate_paths(1000, 16, 2, 1.0, seed=5, threads=8)
    c = simulate_paths(1000, 16, 2, 1.0, seed=6, threads=1)
    assert np.array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, c.increments)


def test_paths_have_brownian_moments():
    p = simulate_paths(100_000, 10, 1, 2.0, seed=1)
    bt = p.levels[:, -1, 0]
    assert abs(bt.mean()) < 4 * math.sqrt(2.0 / 1e5)
    assert bt.var() == pytest.approx(2.0, rel=0.02)
    assert p.levels[:, 0, 0].tolist() == [0.0] * 100_000


def test_path_limits():
    with pytest.raises(ResourceLimit):
        simulate_paths(10**6, 1000, 1, 1.0, seed=0)
    with pytest.raises(InvalidParameters):
        simulate_paths(10, 10, 1, 1.0, seed=-1)
    with pytest.raises(InvalidParameters):
        simulate_paths(10, 0, 1, 1.0, seed=0)


def test_level_at_requires_grid_time():
    p = simulate_paths(10, 4, 1, 1.0, seed=0)
    assert np.array_equal(p.level_at(0.5), p.levels[:, 2, :])
    with pytest.raises(InvalidParameters):
        p.level_at(0.3)


def test_zero_driver_gives_sample_mean():
    p = simulate_paths(5000, 8, 1, 1.0, seed=2)
    x = p.levels[:, -1, 0] ** 2
    sol = solve_lsmc(ZeroDriver(1), x, p)
    assert sol.y0 == pytest.approx(x.mean(), rel=1e-12)


def test_constant_terminal_value_is_discounted():
    # Trivial target: X = c under a pure-rate linear driver.
    r, c = 0.05, 2.0
    d = LinearDriver(TimeGrid(1.0, 50), 1, r, 0.0)
    p = simulate_paths(100_000, 50, 1, 1.0, seed=3)
    sol = solve_lsmc(d, np.full(p.n_paths, c), p)
    assert sol.y0 == pytest.approx(c * math.exp(-r), rel=2e-3)


def test_linear_solver_matches_density_expectation():
    d = LinearDriver(TimeGrid(1.0, 50), 1, 0.02, 0.4, 0.1)
    p = simulate_paths(100_000, 50, 1, 1.0, seed=4)
    x = np.maximum(p.levels[:, -1, 0], 0.0)
    rho = sample_density(density_law(d), p)
    ref = solve_linear_closed_form(d, x, rho)
    sol = solve_lsmc(d, x, p)
    assert abs(sol.y0 - ref.value) < max(0.01 * abs(ref.value), 3 * math.hypot(sol.std_err, ref.std_err))


def test_quadratic_driver_matches_exponential_certainty_equivalent():
    # g = -z^2/2 gives Y_0 = log E[exp(X)]; for X = B_T ~ N(0, 1) that is 1/2.
    p = simulate_paths(40_000, 40, 1, 1.0, seed=8)
    sol = solve_lsmc(constant_f(0.5), p.levels[:, -1, 0], p)
    assert abs(sol.y0 - 0.5) < max(0.01, 3 * sol.std_err)


def test_sublinear_driver_cost_on_brownian_terminal():
    # X = B_T has Z = 1, so Y_0 = K T exactly.
    p = simulate_paths(20_000, 20, 1, 1.0, seed=9)
    d = SublinearDriver(TimeGrid(1.0, 20), 1, 0.1, 0.1)
    sol = solve_lsmc(d, p.levels[:, -1, 0], p, terminal_mean=0.0)
    assert sol.y0 == pytest.approx(0.1, abs=2e-3)


def test_solver_input_checks():
    p = simulate_paths(100, 4, 1, 1.0, seed=0)
    with pytest.raises(DimensionMismatch):
        solve_lsmc(ZeroDriver(1), np.zeros(99), p)
    with pytest.raises(InvalidParameters):
        solve_lsmc(ZeroDriver(1), np.zeros(100), p, basis_degree=0)
    with pytest.raises(DimensionMismatch):
        solve_lsmc(ZeroDriver(1), np.zeros(100), p, regressors=np.zeros((100, 3)))


def test_degenerate_regression_is_reported():
    p = simulate_paths(6, 4, 1, 1.0, seed=0)
    d = LinearDriver(TimeGrid(1.0, 4), 1, 0.0, 0.1)
    with pytest.raises(RegressionSingular):
        solve_lsmc(d, p.levels[:, -1, 0], p, basis_degree=8)


def test_comparison_probe_orders_solutions():
    p = simulate_paths(20_000, 20, 1, 1.0, seed=12)
    g = TimeGrid(1.0, 20)
    low = SublinearDriver(g, 1, 0.3, 0.3)
    high = LinearDriver(g, 1, 0.0, 0.0)
    x = Normal(0.0, 1.0).quantile_z(p.levels[:, -1, 0])
    rep = comparison_probe(low, high, x + 0.01, x, p)
    assert rep.ordered and rep.y0_first > rep.y0_second


def test_comparison_probe_checks_preconditions():
    p = simulate_paths(1000, 4, 1, 1.0, seed=0)
    g = TimeGrid(1.0, 4)
    x = p.levels[:, -1, 0]
    with pytest.raises(PreconditionViolated):
        comparison_probe(ZeroDriver(1), ZeroDriver(1), x - 1, x, p)
    with pytest.raises(PreconditionViolated):
        comparison_probe(LinearDriver(g, 1, 0.0, 0.5), ZeroDriver(1), x, x, p)


def test_batch_error_covers_regression_noise():
    paths = simulate_paths(5000, 20, 1, 1.0, seed=21)
    x = paths.levels[:, -1, 0]
    single = solve_lsmc(constant_f(-0.5), x, paths, batches=1)
    pooled = solve_lsmc(constant_f(-0.5), x, paths, batches=8)
    assert pooled.y0 == single.y0
    assert single.std_err == single.diagnostics["std_err_per_path"]
    assert single.diagnostics["std_err_batch"] is None
    assert pooled.std_err == max(pooled.diagnostics["std_err_per_path"],
                                 pooled.diagnostics["std_err_batch"])
    assert pooled.diagnostics["batches"] == 8


def test_batch_error_is_skipped_when_blocks_are_too_small():
    paths = simulate_paths(2000, 10, 1, 1.0, seed=22)
    x = paths.levels[:, -1, 0]
    sol = solve_lsmc(constant_f(-0.5), x, paths, batches=10)
    assert sol.diagnostics["std_err_batch"] is None
    with pytest.raises(InvalidParameters):
        solve_lsmc(constant_f(-0.5), x, paths, batches=0)
