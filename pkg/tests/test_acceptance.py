"""The twelve acceptance criteria, one test each, at their stated tolerances.

Each test records a ``ACCEPTANCE k: PASS|FAIL ...`` line that is printed in
the terminal summary. Run on its own with ``pytest tests/test_acceptance.py``
or ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

import conftest
import oracles
from gdist.bsde import comparison_probe, simulate_paths, solve_lsmc
from gdist.distkit import Empirical, Lognormal, Normal, TwoPoint, hl_integral
from gdist.drivers import (LinearDriver, MarketParams, SublinearDriver, TimeGrid, TwoRateDriver,
                           ZeroDriver, constant_f)
from gdist.efficiency import (GaussianPayoff, g_expectation_linear, minimizing_sequence_cost,
                              two_rate_bounds, two_rate_sufficient_lower)
from gdist.lawinv import (build_phi, invariance_probe, law_invariant_expectation, pde_residual,
                          phi_for_driver)
from gdist.portfolio import (Distortion, Utility, concave_envelope, eu_two_rate, rdu_law_invariant,
                             rdu_sublinear)

PATHS = 100_000
STEPS = 100


def record(k: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE_LINES.append(f"ACCEPTANCE {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(conftest.ACCEPTANCE_LINES[-1])


# ---------------------------------------------------------------------------
# 1. Linear closed form against the solver


def _random_linear(rng, n, steps):
    pieces = 4
    per = steps // pieces

    def piecewise(size):
        return np.repeat(size, per, axis=0)

    r = piecewise(rng.uniform(0.0, 0.05, pieces))
    theta = piecewise(rng.uniform(-0.5, 0.5, (pieces, n)))
    delta = piecewise(rng.uniform(-0.1, 0.1, pieces))
    return LinearDriver(TimeGrid(1.0, steps), n, r, theta, delta)


def test_acceptance_1_linear_closed_form_matches_lsmc():
    rng = np.random.default_rng(20261016)
    laws = {"normal": Normal(1.0, 0.5), "lognormal": Lognormal(0.0, 0.4),
            "two_point": TwoPoint(0.0, 2.0, 0.7)}
    worst, slowest, failures = 0.0, 0.0, []
    for case in range(5):
        n = 1 + case % 2
        driver = _random_linear(rng, n, STEPS)
        paths = simulate_paths(PATHS, STEPS, n, 1.0, seed=1000 + case)
        for name, mu in laws.items():
            start = time.perf_counter()
            res = g_expectation_linear(driver, mu)
            payoff = res.efficient_payoff
            sol = solve_lsmc(driver, payoff.samples(paths), paths, regressors=payoff.regressors(paths))
            elapsed = time.perf_counter() - start
            tol = max(0.01 * abs(res.value), 3 * sol.std_err)
            err = abs(sol.y0 - res.value)
            worst = max(worst, err / tol)
            slowest = max(slowest, elapsed)
            if err > tol or elapsed > 60:
                failures.append((case, name, res.value, sol.y0, sol.std_err, elapsed))
    ok = not failures
    record(1, ok, f"15 cases, worst |diff|/tol = {worst:.2f}, slowest case {slowest:.1f}s")
    assert ok, failures


# ---------------------------------------------------------------------------
# 2. Hardy-Littlewood exactness


def test_acceptance_2_hl_equals_permutation_minimum_exactly():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    cases = mismatches = 0
    for n in range(1, 7):
        for _ in range(5 if n == 6 else 20):
            x = rng.normal(size=n) * rng.choice([1.0, 10.0])
            e = rng.lognormal(size=n)
            if rng.random() < 0.3:
                x[: n // 2] = x[0]  # ties
            cases += 1
            if hl_integral(Empirical(x), Empirical(e)) != oracles.hl_brute_force(np.sort(x), np.sort(e)):
                mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 1.0
    record(2, ok, f"{cases} laws on 1..6 points, {mismatches} mismatches, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. Sublinear minimizing sequence


def test_acceptance_3_sublinear_minimizing_sequence():
    K = 0.1
    driver = SublinearDriver(TimeGrid(1.0, STEPS), 1, K, K)
    mu = Normal(0.0, 1.0)
    # Cauchy-Schwarz with the Ito isometry: int_0^a E|Z| <= sqrt(a) * sd(mu).
    c_fit = 1.0
    start = time.perf_counter()
    paths = simulate_paths(PATHS, STEPS, 1, 1.0, seed=33)
    alphas = [0.5, 0.25, 0.1, 0.05]
    gaps = [minimizing_sequence_cost(driver, mu, a, paths).value - 0.0 for a in alphas]
    elapsed = time.perf_counter() - start
    decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
    bounded = all(0 < g <= 1.5 * math.sqrt(a) * K * c_fit for a, g in zip(alphas, gaps))
    slope = float(np.polyfit(np.log(alphas), np.log(gaps), 1)[0]) if all(g > 0 for g in gaps) else float("nan")
    ok = decreasing and bounded and slope >= 0.4 and elapsed < 300
    record(3, ok, "gaps " + ", ".join(f"{g:.5f}" for g in gaps) + f"; slope {slope:.3f}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4. Law invariance for the quadratic example


def test_acceptance_4_law_invariance_example():
    driver = constant_f(-0.5)  # g = z^2 / 2, value -log E[exp(-X)] = -1/2 for N(0, 1)
    mu = Normal(0.0, 1.0)
    start = time.perf_counter()
    quad_value = law_invariant_expectation(phi_for_driver(driver), mu, driver.alpha_bound)
    paths = simulate_paths(PATHS, STEPS, 1, 1.0, seed=44)
    rep = invariance_probe(driver, mu, paths)
    elapsed = time.perf_counter() - start
    within = [abs(v + 0.5) <= 3 * s for v, s in zip(rep.values, rep.std_errs)]
    ok = abs(quad_value + 0.5) <= 1e-6 and all(within) and elapsed < 180
    record(4, ok, f"quadrature {quad_value:.10f}; lsmc " +
           ", ".join(f"{n}={v:.4f}±{s:.4f}" for n, v, s in zip(rep.names, rep.values, rep.std_errs))
           + f"; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 5. Constant-coefficient family


def test_acceptance_5_constant_f_two_point():
    mu = TwoPoint(0.0, 1.0, 0.5)
    errs = []
    for k in (-1.0, -0.25, 0.25):
        d = constant_f(k)
        value = law_invariant_expectation(phi_for_driver(d), mu, d.alpha_bound)
        exact = math.log(0.5 + 0.5 * math.exp(2 * k)) / (2 * k)
        errs.append(abs(value - exact))
    ok = max(errs) <= 1e-8
    record(5, ok, "max error " + f"{max(errs):.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 6. Compatibility PDE residual


def test_acceptance_6_pde_residual_order():
    pairs = {
        "travelling wave": (lambda t, y: 0.25 * np.sin(y - 0.3 * t), 0.3),
        "stationary": (lambda t, y: 0.25 * np.cos(y) / (1 + 0.5 * np.sin(y)) + 0.0 * t,
                       lambda t, y: 1 + 0.5 * np.sin(y) + 0.0 * t),
    }
    start = time.perf_counter()
    orders = {}
    for name, (f, h) in pairs.items():
        res = [pde_residual(f, h, np.linspace(0, 1, n), np.linspace(-3, 3, n)) for n in (21, 41, 81)]
        orders[name] = min(math.log(a.max_abs / b.max_abs) / math.log(a.h_grid / b.h_grid)
                           for a, b in zip(res, res[1:]))
    bad = pde_residual(lambda t, y: 0.1 * t * y, 0.0, np.linspace(0, 1, 41), np.linspace(-3, 3, 41))
    elapsed = time.perf_counter() - start
    ok = all(o >= 1.8 for o in orders.values()) and bad.max_abs >= 0.1 and elapsed < 10
    record(6, ok, ", ".join(f"{k} order {v:.3f}" for k, v in orders.items())
           + f"; violating pair residual {bad.max_abs:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 7. Two-rate sandwich


def test_acceptance_7_two_rate_sandwich():
    r, R, sigma, theta = 0.02, 0.05, 1.0, -0.1
    market = MarketParams(TimeGrid(1.0, STEPS), 1, r, R, [[sigma]], [r + sigma * theta])
    driver = TwoRateDriver(market)
    mu = Lognormal(0.0, 0.2)
    bound = max(two_rate_bounds(market, mu))
    paths = simulate_paths(PATHS, STEPS, 1, 1.0, seed=77)
    rng = np.random.default_rng(7)
    below = []
    lowest = math.inf
    for i in range(20):
        kind = i % 4
        if kind == 0:
            w = rng.normal(size=STEPS)
        elif kind == 1:
            w = np.where(rng.random(STEPS) < 0.5, 1.0, -1.0) * rng.uniform(0.2, 1.0, STEPS)
        elif kind == 2:
            w = np.zeros(STEPS)
            w[rng.integers(0, STEPS // 2):] = rng.choice([-1.0, 1.0])
        else:
            w = rng.choice([-1.0, 1.0]) * np.ones(STEPS)
        payoff = GaussianPayoff(mu, w)
        sol = solve_lsmc(driver, payoff.samples(paths), paths, regressors=payoff.regressors(paths))
        lowest = min(lowest, sol.y0)
        if bound > sol.y0 + 3 * sol.std_err:
            below.append((i, sol.y0, sol.std_err))
    cert = two_rate_sufficient_lower(market, mu)
    attained_ok = False
    detail = "sufficient condition not certified"
    if cert is not None:
        payoff = cert.efficient_payoff
        sol = solve_lsmc(driver, payoff.samples(paths), paths, regressors=payoff.regressors(paths))
        attained_ok = abs(sol.y0 - cert.value) <= max(0.01 * abs(cert.value), 3 * sol.std_err)
        detail = f"efficient payoff lsmc {sol.y0:.5f}±{sol.std_err:.5f} vs closed form {cert.value:.5f}"
    ok = not below and attained_ok
    record(7, ok, f"bound {bound:.5f} <= lowest of 20 couplings {lowest:.5f}; {detail}")
    assert ok, below


# ---------------------------------------------------------------------------
# 8. EU budget identity


def test_acceptance_8_eu_budget_identity():
    market = MarketParams(TimeGrid(1.0, STEPS), 1, 0.02, 0.05, [[1.0]], [-0.08])
    worst_lam = worst_res = 0.0
    for x0 in (0.5, 1.0, 10.0):
        res = eu_two_rate(Utility("log"), market, x0)
        worst_lam = max(worst_lam, abs(res.lam * x0 - 1.0))
        worst_res = max(worst_res, res.budget_residual)
    ok = worst_lam <= 1e-8 and worst_res <= 1e-8
    record(8, ok, f"max |lambda x0 - 1| = {worst_lam:.1e}, max budget residual = {worst_res:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 9. Envelope against brute force


def test_acceptance_9_envelope_exact():
    rng = np.random.default_rng(9)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(100):
        x = np.sort(rng.uniform(0, 1, 17))
        y = rng.normal(size=17)
        env = concave_envelope(x, y)
        values, vertices = oracles.hull_brute_force(x, y)
        if env.hull.tolist() != vertices or not np.array_equal(env.values, values):
            mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 5
    record(9, ok, f"100 random 17-node functions, {mismatches} mismatches, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 10. RDU solvers agree on their common case


def test_acceptance_10_rdu_cross_solver():
    w = Distortion("power", 0.7)
    phi = build_phi(0.0, 0.0)
    p = np.linspace(0.01, 0.99, 981)
    start = time.perf_counter()
    diffs = {}
    for name, u in (("log", Utility("log")), ("power 0.5", Utility("power", 0.5))):
        a = rdu_sublinear(u, w, 1.0, levels=p)
        b = rdu_law_invariant(u, w, phi, 1.0, levels=p)
        diffs[name] = float(np.max(np.abs(a.quantiles - b.quantiles)))
    elapsed = time.perf_counter() - start
    ok = max(diffs.values()) <= 1e-4 and elapsed < 30
    record(10, ok, ", ".join(f"{k}: sup diff {v:.1e}" for k, v in diffs.items()) + f"; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 11. Comparison principle


def _comparison_pair(rng, i, grid):
    kind = i % 5
    if kind == 0:
        a2, c2 = rng.uniform(0, 0.3, 2)
        return (SublinearDriver(grid, 1, a2 + rng.uniform(0, 0.3), c2 + rng.uniform(0, 0.3)),
                SublinearDriver(grid, 1, a2, c2))
    if kind == 1:
        r, th = rng.uniform(0, 0.05), rng.uniform(-0.5, 0.5)
        d2 = rng.uniform(-0.1, 0.1)
        return (LinearDriver(grid, 1, r, th, d2 - rng.uniform(0, 0.1)), LinearDriver(grid, 1, r, th, d2))
    if kind == 2:
        r = rng.uniform(0, 0.03)
        m = MarketParams(grid, 1, r, r + rng.uniform(0, 0.1), [[rng.uniform(0.5, 1.5)]],
                         [r + rng.uniform(-0.2, 0.2)])
        two = TwoRateDriver(m)
        return two, two.lower_linear()
    if kind == 3:
        k2 = rng.uniform(-0.4, 0.3)
        return constant_f(k2 + rng.uniform(0, 0.2)), constant_f(k2)
    return SublinearDriver(grid, 1, rng.uniform(0, 0.3), rng.uniform(0, 0.3)), ZeroDriver(1)


def test_acceptance_11_comparison_probe():
    steps, n_paths = 50, 50_000
    grid = TimeGrid(1.0, steps)
    rng = np.random.default_rng(11)
    paths = simulate_paths(n_paths, steps, 1, 1.0, seed=111)
    start = time.perf_counter()
    violations = []
    for i in range(20):
        d1, d2 = _comparison_pair(rng, i, grid)
        mu = [Normal(0.0, 1.0), TwoPoint(-1.0, 1.0, 0.5), Lognormal(0.0, 0.3)][i % 3]
        payoff = GaussianPayoff(mu, np.ones(steps))
        x2 = payoff.samples(paths)
        x1 = x2 + (0.0 if i % 2 else rng.uniform(0, 0.05))
        rep = comparison_probe(d1, d2, x1, x2, paths, regressors=payoff.regressors(paths))
        if not rep.ordered:
            violations.append((i, rep))
    elapsed = time.perf_counter() - start
    ok = not violations and elapsed < 300
    record(11, ok, f"20 pairs, {len(violations)} violations, {elapsed:.0f}s")
    assert ok, violations


# ---------------------------------------------------------------------------
# 12. CLI determinism


LAW = {"kind": "normal", "mean": 0.0, "std": 1.0}
MARKET = {"T": 1.0, "steps": 20, "r": 0.02, "R": 0.05, "sigma": [[1.0]], "b": [-0.08]}
SUBLINEAR = {"kind": "sublinear", "T": 1.0, "steps": 20, "A": [0.1], "C": [0.1]}
RES = {"paths": 4000, "steps": 20}
CLI_MATRIX = {
    "price": {"command": "price", "inputs": {"driver": {"kind": "two_rate", "market": MARKET},
                                             "law": {"kind": "lognormal", "log_mean": 0.0, "log_std": 0.2}}},
    "bounds": {"command": "bounds", "inputs": {"market": MARKET, "law": LAW}},
    "sufficient": {"command": "sufficient", "format": "csv", "inputs": {"market": MARKET, "law": LAW}},
    "sublinear-convergence": {"command": "sublinear-convergence", "seed": 3, "resolution": RES,
                              "format": "csv", "inputs": {"driver": SUBLINEAR, "law": LAW}},
    "law-invariance": {"command": "law-invariance", "seed": 4, "resolution": RES,
                       "inputs": {"driver": {"kind": "z_separable", "builtin": "example44"}, "law": LAW}},
    "pde-check": {"command": "pde-check", "inputs": {"f": 0.25, "h": 0.0}},
    "portfolio-eu": {"command": "portfolio-eu", "format": "csv",
                     "inputs": {"utility": {"kind": "log"}, "market": MARKET, "x0": 1.0}},
    "portfolio-rdu": {"command": "portfolio-rdu", "inputs": {"utility": {"kind": "power", "gamma": 0.5},
                                                             "distortion": {"kind": "power", "a": 0.7},
                                                             "y0": 1.0}},
    "portfolio-rdu-li": {"command": "portfolio-rdu-li",
                         "inputs": {"utility": {"kind": "log"}, "distortion": {"kind": "power", "a": 0.7},
                                    "driver": {"kind": "z_separable", "constant_f": 0.2}, "y0": 1.0}},
    "lsmc-crosscheck": {"command": "lsmc-crosscheck", "seed": 5, "resolution": RES, "format": "csv",
                        "inputs": {"driver": {"kind": "linear", "T": 1.0, "steps": 20, "r": 0.02,
                                              "theta": [0.3]}, "law": LAW}},
}


def _run_matrix(base, threads):
    outputs = {}
    for name, spec in CLI_MATRIX.items():
        spec_path = os.path.join(base, f"{name}.json")
        with open(spec_path, "w", encoding="utf-8") as fh:
            json.dump(spec, fh)
        out_dir = os.path.join(base, f"{name}-t{threads}")
        proc = subprocess.run([sys.executable, "-m", "gdist.cli", "--spec", spec_path, "--out", out_dir,
                               "--threads", str(threads)], capture_output=True)
        files = {}
        for fname in sorted(os.listdir(out_dir)):
            with open(os.path.join(out_dir, fname), "rb") as fh:
                files[fname] = fh.read()
        outputs[name] = (proc.returncode, files)
        os.rename(out_dir, out_dir + f"-{time.perf_counter_ns()}")
    return outputs


def test_acceptance_12_cli_determinism(tmp_path):
    runs = [_run_matrix(str(tmp_path), t) for t in (1, 8, 1)]
    codes = {name: out[0] for name, out in runs[0].items()}
    identical = all(r == runs[0] for r in runs[1:])
    ok = identical and all(c == 0 for c in codes.values())
    record(12, ok, f"{len(CLI_MATRIX)} commands x threads (1, 8, 1): "
           + ("byte-identical" if identical else "outputs differ")
           + ("" if all(c == 0 for c in codes.values()) else f"; exit codes {codes}"))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
