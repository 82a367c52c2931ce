"""Batch command-line front end.

Usage::

    gdist --spec experiment.json [--out DIR] [--seed N] [--paths N] [--steps N]
          [--threads N] [--format {json,csv}]

The spec is validated against ``schemas/input.schema.json`` before anything
runs. Exit status is 0 on success, 2 when the spec is invalid and 3 on a
numerical failure; in the last two cases a JSON diagnostic goes to stderr
(and to ``error.json`` in the output directory).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from importlib import resources
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from .bsde import default_threads, simulate_paths, solve_lsmc
from .distkit import chebyshev_levels, law_from_dict
from .drivers import (LinearDriver, MarketParams, SublinearDriver, TabulatedField, TimeGrid,
                      TwoRateDriver, ZeroDriver, ZSeparableDriver, constant_f, example44)
from .efficiency import (ATTAINED, BOUND_ONLY, EfficiencyResult, GaussianPayoff,
                         g_expectation_linear, g_expectation_sublinear,
                         minimizing_sequence_cost, two_rate_bounds, two_rate_sufficient_lower,
                         two_rate_sufficient_upper)
from .errors import DimensionMismatch, GDistError, InvalidParameters
from .lawinv import invariance_probe, law_invariant_expectation, pde_residual, phi_for_driver
from .portfolio import Distortion, Utility, eu_two_rate, rdu_law_invariant, rdu_sublinear

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
DEFAULTS = {"paths": 100_000, "steps": 100, "basis_degree": 4}
REPORT_LEVELS = 129


def load_schema(name: str) -> dict:
    with resources.files("gdist").joinpath("schemas", name).open("r", encoding="utf-8") as fh:
        return json.load(fh)


def validate_spec(spec) -> list[dict]:
    """Schema errors as ``{"path", "message"}`` records (empty when valid)."""
    validator = jsonschema.Draft202012Validator(load_schema("input.schema.json"))
    errors = []
    for err in validator.iter_errors(spec):
        errors.append({"path": "/".join(str(p) for p in err.absolute_path),
                       "message": err.message})
    errors.sort(key=lambda e: (e["path"], e["message"]))
    return errors


# ---------------------------------------------------------------------------
# Spec -> objects


def _field(spec):
    if isinstance(spec, (int, float)):
        c = float(spec)
        return lambda t, y: np.full(np.broadcast_shapes(np.shape(t), np.shape(y)), c)
    return TabulatedField(spec["t"], spec["y"], spec["values"])


def driver_from_dict(spec: dict):
    kind = spec["kind"]
    if kind == "zero":
        return ZeroDriver(int(spec.get("n", 1)))
    if kind == "linear":
        grid = TimeGrid(float(spec["T"]), int(spec["steps"]))
        return LinearDriver(grid, int(spec.get("n", 1)), spec["r"], spec["theta"],
                            spec.get("delta", 0.0))
    if kind == "two_rate":
        return TwoRateDriver(MarketParams.from_dict(spec["market"]))
    if kind == "sublinear":
        grid = TimeGrid(float(spec["T"]), int(spec["steps"]))
        return SublinearDriver(grid, int(spec.get("n", 1)), spec["A"], spec["C"])
    T = float(spec.get("T", 1.0))
    if "builtin" in spec:
        return example44(T)
    if "constant_f" in spec:
        return constant_f(float(spec["constant_f"]), T)
    return ZSeparableDriver(_field(spec["f"]), _field(spec.get("h", 0.0)),
                            float(spec["alpha_bound"]), float(spec.get("beta_bound", 0.0)), T)


def _horizon(driver) -> float:
    if isinstance(driver, ZSeparableDriver):
        return driver.T
    grid = getattr(driver, "grid", None)
    return grid.T if grid is not None else 1.0


def _price(driver, mu, steps: int) -> EfficiencyResult:
    if isinstance(driver, ZeroDriver):
        return EfficiencyResult(float(mu.mean()), ATTAINED, GaussianPayoff(mu, np.ones(steps)),
                                {"result": "plain mean"})
    if isinstance(driver, LinearDriver):
        return g_expectation_linear(driver, mu)
    if isinstance(driver, TwoRateDriver):
        for check in (two_rate_sufficient_lower, two_rate_sufficient_upper):
            res = check(driver.market, mu)
            if res is not None:
                return res
        lo, hi = two_rate_bounds(driver.market, mu)
        return EfficiencyResult(max(lo, hi), BOUND_ONLY, None,
                                {"result": "two-rate lower bounds", "lower_standard": lo,
                                 "lower_modified": hi})
    if isinstance(driver, SublinearDriver):
        return g_expectation_sublinear(driver, mu)
    phi = phi_for_driver(driver)
    value = law_invariant_expectation(phi, mu, driver.alpha_bound, driver.beta_bound)
    cert = {"result": "law-invariant transform"}
    if phi.residual is not None:
        cert["pde_residual"] = phi.residual.to_dict()
    return EfficiencyResult(value, ATTAINED, GaussianPayoff(mu, np.ones(steps)), cert)


# ---------------------------------------------------------------------------
# Commands. Each returns (result dict, csv header, csv rows).


def cmd_price(inp, ctx):
    driver = driver_from_dict(inp["driver"])
    res = _price(driver, law_from_dict(inp["law"]), ctx["steps"])
    out = res.to_dict()
    return out, ["value", "std_err", "attained", "status"], [
        [out["value"], out["std_err"], out["attained"], out["status"]]]


def cmd_bounds(inp, ctx):
    market = MarketParams.from_dict(inp["market"])
    lo, hi = two_rate_bounds(market, law_from_dict(inp["law"]))
    out = {"lower_standard": lo, "lower_modified": hi, "lower_bound": max(lo, hi),
           "status": BOUND_ONLY}
    return out, ["lower_standard", "lower_modified", "lower_bound"], [[lo, hi, max(lo, hi)]]


def cmd_sufficient(inp, ctx):
    market = MarketParams.from_dict(inp["market"])
    mu = law_from_dict(inp["law"])
    out, rows = {}, []
    for side, check in (("lower", two_rate_sufficient_lower), ("upper", two_rate_sufficient_upper)):
        res = check(market, mu)
        out[side] = None if res is None else res.to_dict()
        c = market.lower_constant() if side == "lower" else market.upper_constant()
        gb = (res.certificate.get("grid_bounds") if res is not None else None) or [None, None]
        rows.append([side, res is not None, None if res is None else res.value, c, gb[0], gb[1]])
    return out, ["side", "attained", "value", "c", "grid_min", "grid_max"], rows


def _paths(ctx, dim: int, T: float):
    return simulate_paths(ctx["paths"], ctx["steps"], dim, T, ctx["seed"], ctx["threads"])


def cmd_sublinear_convergence(inp, ctx):
    driver = driver_from_dict(inp["driver"])
    if not isinstance(driver, SublinearDriver):
        raise InvalidParameters("sublinear-convergence needs a sublinear driver")
    mu = law_from_dict(inp["law"])
    T = driver.grid.T
    paths = _paths(ctx, driver.n, T)
    mean = float(mu.mean())
    points, rows = [], []
    for frac in inp.get("alphas", [0.5, 0.25, 0.1, 0.05]):
        k = max(1, int(round(frac * paths.n_steps)))
        alpha = k * paths.dt
        est = minimizing_sequence_cost(driver, mu, alpha, paths, ctx["basis_degree"])
        rec = {"alpha": alpha, "value": est.value, "std_err": est.std_err,
               "gap": est.value - mean, "sqrt_alpha": math.sqrt(alpha)}
        points.append(rec)
        rows.append([rec["alpha"], rec["value"], rec["std_err"], rec["gap"], rec["sqrt_alpha"]])
    gaps = np.array([p["gap"] for p in points])
    alphas = np.array([p["alpha"] for p in points])
    slope = None
    if np.all(gaps > 0):
        slope = float(np.polyfit(np.log(alphas), np.log(gaps), 1)[0])
    order = np.argsort(-alphas)
    decreasing = bool(np.all(np.diff(gaps[order]) < 0))
    out = {"mean": mean, "points": points, "log_log_slope": slope, "decreasing": decreasing,
           "status": g_expectation_sublinear(driver, mu).attained}
    return out, ["alpha", "value", "std_err", "gap", "sqrt_alpha"], rows


def cmd_law_invariance(inp, ctx):
    driver = driver_from_dict(inp["driver"])
    if not isinstance(driver, ZSeparableDriver):
        raise InvalidParameters("law-invariance needs a z-separable driver")
    mu = law_from_dict(inp["law"])
    phi = phi_for_driver(driver)
    value = law_invariant_expectation(phi, mu, driver.alpha_bound, driver.beta_bound)
    out = {"value": value, "pde_residual": None if phi.residual is None else phi.residual.to_dict(),
           "probe": None}
    rows = [["quadrature", value, 0.0]]
    if inp.get("probe", True):
        paths = _paths(ctx, driver.n, driver.T)
        rep = invariance_probe(driver, mu, paths, basis_degree=ctx["basis_degree"])
        out["probe"] = rep.to_dict()
        rows += [[n, v, s] for n, v, s in zip(rep.names, rep.values, rep.std_errs)]
    return out, ["construction", "value", "std_err"], rows


def cmd_pde_check(inp, ctx):
    f, h = _field(inp["f"]), _field(inp["h"])
    T = float(inp.get("T", 1.0))
    lo, hi = float(inp.get("y_min", -3.0)), float(inp.get("y_max", 3.0))
    n = int(inp.get("points", 21))
    levels, rows = [], []
    for j in range(int(inp.get("refinements", 3))):
        m = (n - 1) * 2**j + 1
        res = pde_residual(f, h, np.linspace(0.0, T, m), np.linspace(lo, hi, m))
        levels.append(res.to_dict())
    orders = []
    for a, b in zip(levels, levels[1:]):
        if a["max_abs"] > 0 and b["max_abs"] > 0:
            orders.append(math.log(a["max_abs"] / b["max_abs"]) / math.log(a["h_grid"] / b["h_grid"]))
        else:
            orders.append(None)
    for lv, od in zip(levels, [None] + orders):
        rows.append([lv["h_grid"], lv["max_abs"], od])
    out = {"levels": levels, "observed_orders": orders}
    return out, ["h_grid", "max_abs", "observed_order"], rows


def _quantile_rows(p, q):
    return [[a, b] for a, b in zip(p.tolist(), q.tolist())]


def cmd_portfolio_eu(inp, ctx):
    res = eu_two_rate(Utility.from_dict(inp["utility"]), MarketParams.from_dict(inp["market"]),
                      float(inp["x0"]))
    p = chebyshev_levels(REPORT_LEVELS)
    out = res.to_dict(p)
    return out, ["p", "quantile"], _quantile_rows(p, np.asarray(out["quantiles"]))


def cmd_portfolio_rdu(inp, ctx):
    p = chebyshev_levels(REPORT_LEVELS)
    res = rdu_sublinear(Utility.from_dict(inp["utility"]), Distortion.from_dict(inp["distortion"]),
                        float(inp["y0"]), levels=p)
    return res.to_dict(), ["p", "quantile"], _quantile_rows(p, res.quantiles)


def cmd_portfolio_rdu_li(inp, ctx):
    driver = driver_from_dict(inp["driver"])
    if not isinstance(driver, ZSeparableDriver):
        raise InvalidParameters("portfolio-rdu-li needs a z-separable driver")
    p = chebyshev_levels(REPORT_LEVELS)
    res = rdu_law_invariant(Utility.from_dict(inp["utility"]),
                            Distortion.from_dict(inp["distortion"]),
                            phi_for_driver(driver), float(inp["y0"]), levels=p)
    return res.to_dict(), ["p", "quantile"], _quantile_rows(p, res.quantiles)


def cmd_lsmc_crosscheck(inp, ctx):
    driver = driver_from_dict(inp["driver"])
    mu = law_from_dict(inp["law"])
    res = _price(driver, mu, ctx["steps"])
    T = _horizon(driver)
    paths = _paths(ctx, driver.n, T)
    payoff = res.efficient_payoff or GaussianPayoff(mu, np.ones(paths.n_steps))
    if isinstance(payoff, GaussianPayoff) and payoff.weights.size != paths.n_steps:
        payoff = GaussianPayoff(mu, np.ones(paths.n_steps))
    sol = solve_lsmc(driver, payoff.samples(paths), paths, ctx["basis_degree"],
                     regressors=payoff.regressors(paths))
    tol = max(0.01 * abs(res.value), 3 * sol.std_err)
    if res.attained == ATTAINED:
        check, holds = "equal", abs(sol.y0 - res.value) <= tol
    else:
        check, holds = "lower_bound", sol.y0 >= res.value - 3 * sol.std_err
    out = {"closed_form": res.value, "status": res.attained, "lsmc": sol.y0,
           "std_err": sol.std_err, "check": check, "holds": bool(holds),
           "diagnostics": sol.diagnostics}
    return out, ["method", "value", "std_err"], [["closed_form", res.value, 0.0],
                                                  ["lsmc", sol.y0, sol.std_err]]


COMMANDS = {
    "price": cmd_price,
    "bounds": cmd_bounds,
    "sufficient": cmd_sufficient,
    "sublinear-convergence": cmd_sublinear_convergence,
    "law-invariance": cmd_law_invariance,
    "pde-check": cmd_pde_check,
    "portfolio-eu": cmd_portfolio_eu,
    "portfolio-rdu": cmd_portfolio_rdu,
    "portfolio-rdu-li": cmd_portfolio_rdu_li,
    "lsmc-crosscheck": cmd_lsmc_crosscheck,
}


# ---------------------------------------------------------------------------
# Serialization


def _clean(obj):
    """Make a result JSON-safe: numpy scalars to Python, non-finite floats to ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv_cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v) if math.isfinite(float(v)) else ""
    if v is None:
        return ""
    return str(v)


def to_csv(header, rows, seed) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed"] + list(header))
    for row in rows:
        writer.writerow([str(seed)] + [_csv_cell(v) for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Entry points


def run(spec: dict, overrides: Optional[dict] = None):
    """Validate and execute one experiment.

    Returns ``(exit_code, payload, csv_text)``; ``payload`` is the report on
    success and a diagnostic record otherwise.
    """
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    errors = validate_spec(spec)
    if errors:
        return EXIT_INVALID, {"error": "ValidationError", "errors": errors}, None
    res_spec = spec.get("resolution", {})
    ctx = {k: overrides.get(k, res_spec.get(k, DEFAULTS[k])) for k in DEFAULTS}
    ctx["seed"] = int(overrides.get("seed", spec.get("seed", 0)))
    ctx["threads"] = int(overrides.get("threads", res_spec.get("threads", default_threads())))
    try:
        result, header, rows = COMMANDS[spec["command"]](spec["inputs"], ctx)
    except (InvalidParameters, DimensionMismatch) as exc:
        return EXIT_INVALID, {"error": type(exc).__name__,
                              "errors": [{"path": "inputs", "message": str(exc)}],
                              "details": exc.details}, None
    except GDistError as exc:
        return EXIT_NUMERIC, {"error": type(exc).__name__, "message": str(exc),
                              "details": exc.details}, None
    except FloatingPointError as exc:
        return EXIT_NUMERIC, {"error": "FloatingPointError", "message": str(exc), "details": {}}, None
    report = {
        "command": spec["command"],
        "seed": ctx["seed"],
        "resolution": {k: ctx[k] for k in DEFAULTS},
        "version": __version__,
        "result": result,
    }
    return EXIT_OK, _clean(report), to_csv(header, rows, ctx["seed"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gdist",
                                 description="g-expectations of distributions: batch experiments")
    ap.add_argument("--spec", required=True, help="experiment specification (JSON file)")
    ap.add_argument("--out", help="output directory (default: report on stdout)")
    ap.add_argument("--seed", type=int, help="RNG seed (unsigned 64-bit)")
    ap.add_argument("--paths", type=int, help="Monte-Carlo path count")
    ap.add_argument("--steps", type=int, help="time steps for simulated paths")
    ap.add_argument("--threads", type=int,
                    help="worker threads for path generation (default: $GDIST_THREADS or 1)")
    ap.add_argument("--format", choices=("json", "csv"), help="table format (default json)")
    return ap


def _emit_error(code, payload, out_dir):
    text = dumps(payload)
    sys.stderr.write(text)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "error.json"), "w", encoding="utf-8") as fh:
            fh.write(text)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        return _emit_error(EXIT_INVALID, {"error": type(exc).__name__,
                                          "errors": [{"path": "", "message": str(exc)}]}, args.out)
    if args.threads is not None and args.threads < 1:
        return _emit_error(EXIT_INVALID, {"error": "ValidationError",
                                          "errors": [{"path": "--threads",
                                                      "message": "must be >= 1"}]}, args.out)
    overrides = {"seed": args.seed, "paths": args.paths, "steps": args.steps,
                 "threads": args.threads}
    code, payload, table = run(spec, overrides)
    if code != EXIT_OK:
        return _emit_error(code, payload, args.out)
    fmt = args.format or (spec.get("format") if isinstance(spec, dict) else None) or "json"
    text = dumps(payload)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(text)
        if fmt == "csv":
            with open(os.path.join(args.out, "table.csv"), "w", encoding="utf-8") as fh:
                fh.write(table)
    elif fmt == "csv":
        sys.stdout.write(table)
    else:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
