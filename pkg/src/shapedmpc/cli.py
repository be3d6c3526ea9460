"""Command-line interface: run, sweep, calibrate and check subcommands.

Configuration comes from a flat ``key = value`` text file plus command-line
flags; flags win.  Unknown keys are rejected by name.  Exit codes: 0 success,
2 configuration error, 3 numerical failure, 4 check failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .analysis import build_report, estimate_v_infinity, report_row
from .closed_loop import LoopConfig, decay_check, run_closed_loop, trace_to_csv
from .dynamics import make_benchmark
from .ingredients import (RiccatiError, lq_terminal_ingredients,
                          make_quadratic_stage_cost, sample_in_level_set)
from .ocp import NumericalDomainError, SolverSettings
from .shaping import (NonConvergenceError, constant_coefficients,
                      offline_td_calibrate, td_update_closed_form)
from .sweep import BENCHMARK_DEFAULTS, default_sweep_spec, emit_results, run_sweep

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CHECK_FAILED = 4


class ConfigError(ValueError):
    pass


def _parse_floats(text: str) -> tuple:
    try:
        return tuple(float(p) for p in str(text).replace(" ", "").split(",") if p != "")
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# key -> (parser, help text)
CONFIG_KEYS = {
    "benchmark": (str, "benchmark system: msd | primbs"),
    "controller": (str, "closed-loop controller: shaped | baseline"),
    "x0": (_parse_floats, "initial state, comma separated (e.g. 1,0)"),
    "horizon": (int, "OCP horizon N"),
    "c0": (float, "initial coefficient value (all indices)"),
    "update_rule": (str, "coefficient update: td_constrained | allocation | frozen"),
    "coeff_lower_bound": (float, "uniform lower bound on coefficients (optional)"),
    "terminal_level": (float, "terminal sublevel threshold"),
    "state_weights": (_parse_floats, "quadratic stage-cost state weights"),
    "control_weights": (_parse_floats, "quadratic stage-cost control weights"),
    "ocp_tol": (float, "solver stationarity tolerance"),
    "ocp_max_iter": (int, "solver iteration cap per penalty round"),
    "multistart": (int, "number of solver starts (>3 adds seeded random starts)"),
    "seed": (int, "seed ordering any randomized multi-start"),
    "max_steps": (int, "closed-loop step cap"),
    "stop_norm": (float, "state-norm convergence threshold"),
    "tail_tol": (float, "stage-cost truncation threshold"),
    "grid": (_parse_floats, "sweep grid bounds: min0,max0,min1,max1"),
    "points": (_parse_floats, "sweep grid points per dimension (e.g. 41,41 or 41)"),
    "workers": (int, "sweep worker processes"),
    "out_dir": (str, "output directory for artifacts"),
    "surrogate_horizon": (int, "baseline horizon for the optimal-value surrogate"),
    "report": (_parse_bool, "attach per-cell suboptimality reports to sweeps"),
    "samples": (int, "sample count for offline calibration"),
}


def load_config_file(path: str) -> Dict[str, object]:
    values: Dict[str, object] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        parser = CONFIG_KEYS[key][0]
        values[key] = parser(val)
    return values


def _merged_options(args: argparse.Namespace) -> Dict[str, object]:
    opts: Dict[str, object] = {}
    if getattr(args, "config", None):
        opts.update(load_config_file(args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            parser = CONFIG_KEYS[key][0]
            opts[key] = parser(flag) if isinstance(flag, str) else flag
    return opts


def _benchmark_options(opts: Dict[str, object]) -> Dict[str, object]:
    name = str(opts.get("benchmark", "msd"))
    if name not in BENCHMARK_DEFAULTS:
        raise ConfigError(f"unknown benchmark {name!r}; expected one of {sorted(BENCHMARK_DEFAULTS)}")
    merged = dict(BENCHMARK_DEFAULTS[name])
    merged.pop("grid_min", None)
    merged.pop("grid_max", None)
    merged["benchmark"] = name
    merged["terminal_level"] = 0.1
    merged.update(opts)
    return merged


def _solver_settings(opts: Dict[str, object]) -> SolverSettings:
    return SolverSettings(
        tol=float(opts.get("ocp_tol", 1e-8)),
        max_iter=int(opts.get("ocp_max_iter", 5000)),
        multistart=int(opts.get("multistart", 3)),
        seed=int(opts.get("seed", 0)),
    )


def _build_stack(opts: Dict[str, object]):
    model = make_benchmark(str(opts["benchmark"]))
    cost = make_quadratic_stage_cost(opts["state_weights"], opts["control_weights"])
    ingredients = lq_terminal_ingredients(model, cost, level=float(opts["terminal_level"]))
    return model, cost, ingredients


def _loop_config(opts: Dict[str, object], controller: str) -> LoopConfig:
    lb = opts.get("coeff_lower_bound")
    return LoopConfig(
        controller=controller,
        horizon=int(opts["horizon"]),
        initial_coefficients=float(opts.get("c0", 1.0)),
        update_rule=str(opts.get("update_rule", "td_constrained")) if controller == "shaped" else "frozen",
        max_steps=int(opts.get("max_steps", 400)),
        stop_norm=float(opts.get("stop_norm", 1e-6)),
        tail_tol=float(opts.get("tail_tol", 1e-10)),
        coeff_lower_bound=None if lb is None else float(lb),
        solver=_solver_settings(opts),
    )


def cmd_run(args: argparse.Namespace) -> int:
    opts = _benchmark_options(_merged_options(args))
    if "x0" not in opts:
        raise ConfigError("run requires an initial state (--x0)")
    x0 = np.array(opts["x0"], dtype=float)
    controller = str(opts.get("controller", "shaped"))
    model, cost, ingredients = _build_stack(opts)
    config = _loop_config(opts, controller)
    trace = run_closed_loop(model, cost, ingredients, config, x0)
    sys.stdout.write(trace_to_csv(trace))
    print(f"# steps={trace.steps} converged={trace.converged} "
          f"accumulated_cost={trace.accumulated_cost!r} "
          f"terminal_tail_estimate={trace.terminal_tail_estimate!r}")
    if trace.infeasible_at is not None:
        print(f"# solver infeasible at step {trace.infeasible_at}")
        return EXIT_NUMERICAL

    if controller == "shaped" and bool(opts.get("report", True)):
        baseline = run_closed_loop(model, cost, ingredients, _loop_config(opts, "baseline"), x0)
        v_inf = estimate_v_infinity(model, cost, ingredients, x0,
                                    surrogate_horizon=int(opts.get("surrogate_horizon", 60)),
                                    solver=_solver_settings(opts))
        report = build_report(trace, baseline, v_inf)
        for key, val in report_row(report).items():
            print(f"# report {key}={val!r}" if not isinstance(val, str) else f"# report {key}={val}")
    out_dir = opts.get("out_dir")
    if out_dir:
        path = Path(str(out_dir))
        path.mkdir(parents=True, exist_ok=True)
        (path / "trace.csv").write_text(trace_to_csv(trace))
        print(f"# trace written to {path / 'trace.csv'}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    opts = _benchmark_options(_merged_options(args))
    name = str(opts["benchmark"])
    grid = opts.get("grid")
    if grid is not None and len(grid) != 4:
        raise ConfigError("grid expects four numbers: min0,max0,min1,max1")
    points = opts.get("points", (41.0, 41.0))
    if len(points) == 1:
        points = (points[0], points[0])
    spec_kwargs = dict(
        horizon=int(opts["horizon"]), c0=float(opts["c0"]),
        update_rule=str(opts.get("update_rule", "td_constrained")),
        coeff_lower_bound=opts.get("coeff_lower_bound"),
        terminal_level=float(opts["terminal_level"]),
        state_weights=tuple(opts["state_weights"]),
        control_weights=tuple(opts["control_weights"]),
        max_steps=int(opts.get("max_steps", 400)),
        stop_norm=float(opts.get("stop_norm", 1e-6)),
        tail_tol=float(opts.get("tail_tol", 1e-10)),
        workers=int(opts.get("workers", 1)),
        include_report=bool(opts.get("report", False)),
        surrogate_horizon=int(opts.get("surrogate_horizon", 60)),
        ocp_tol=float(opts.get("ocp_tol", 1e-8)),
        ocp_max_iter=int(opts.get("ocp_max_iter", 5000)),
        multistart=int(opts.get("multistart", 3)),
        seed=int(opts.get("seed", 0)),
        grid_points=(int(points[0]), int(points[1])),
    )
    if grid is not None:
        spec_kwargs["grid_min"] = (grid[0], grid[2])
        spec_kwargs["grid_max"] = (grid[1], grid[3])
    spec = default_sweep_spec(name, **spec_kwargs)
    result = run_sweep(spec)
    out_dir = str(opts.get("out_dir", f"sweep_{name}"))
    paths = emit_results(result, out_dir)
    print(f"cells={len(result.cells)} shaped_better={result.fraction_shaped_better:.4f} "
          f"baseline_better={result.fraction_baseline_better:.4f} "
          f"failed={result.fraction_failed:.4f}")
    for label, path in paths.items():
        print(f"{label}: {path}")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    opts = _benchmark_options(_merged_options(args))
    model, cost, ingredients = _build_stack(opts)
    n = int(opts.get("samples", 500))
    rng = np.random.default_rng(int(opts.get("seed", 0)))
    P = ingredients.quadratic_matrix
    zs = sample_in_level_set(P, ingredients.level, n, rng)
    samples = []
    for z in zs:
        x = model.equilibrium_state + z
        samples.append((x, ingredients.local_controller(x)))
    w_star = offline_td_calibrate(model, cost, samples)
    print(f"w_star={w_star!r} samples={n} benchmark={opts['benchmark']}")
    return EXIT_OK


def _check(name: str, fn) -> bool:
    try:
        fn()
    except AssertionError as err:
        print(f"FAIL {name}: {err}")
        return False
    print(f"PASS {name}")
    return True


def cmd_check(args: argparse.Namespace) -> int:
    opts = _merged_options(args)
    benchmarks = [str(opts["benchmark"])] if "benchmark" in opts else ["msd", "primbs"]
    ok = True
    for name in benchmarks:
        base = _benchmark_options({"benchmark": name})
        model, cost, ingredients = _build_stack(base)
        rng = np.random.default_rng(7)

        def equilibrium_fixed_point():
            res = np.max(np.abs(model.step(model.equilibrium_state, model.equilibrium_control)
                                - model.equilibrium_state))
            assert res <= 1e-12, f"equilibrium residual {res:.2e}"

        def terminal_set_invariant():
            zs = sample_in_level_set(ingredients.quadratic_matrix, ingredients.level, 200, rng)
            for z in zs:
                x = model.equilibrium_state + z
                u = ingredients.local_controller(x)
                xp = model.step(x, u)
                assert ingredients.contains(xp), "positive invariance violated"
                assert ingredients.terminal_cost(xp) < ingredients.terminal_cost(x), "decay violated"

        def td_increase():
            c = constant_coefficients(1.0, base["horizon"])
            zs = sample_in_level_set(ingredients.quadratic_matrix, ingredients.level, 8, rng)
            for z in zs:
                x = model.equilibrium_state + z + 0.05
                U = np.tile(model.equilibrium_control + 0.01, (base["horizon"], 1))
                X = np.empty((base["horizon"] + 1, model.state_dim))
                X[0] = x
                for i in range(base["horizon"]):
                    X[i + 1] = model.step(X[i], U[i])
                out = td_update_closed_form(c, X, U, model, cost)
                assert np.all(out.values >= 1.0), "TD update fell below one"

        def short_loop_decay():
            config = LoopConfig(controller="shaped", horizon=base["horizon"],
                                initial_coefficients=base["c0"], update_rule="allocation",
                                max_steps=60, coeff_lower_bound=base["coeff_lower_bound"])
            x0 = np.array([0.4, 0.0]) if name == "msd" else np.array([0.5, 0.5])
            trace = run_closed_loop(model, cost, ingredients, config, x0)
            assert trace.infeasible_at is None, "mid-run infeasibility"
            resid = decay_check(trace)
            assert resid.size == 0 or float(np.max(resid)) <= 1e-6, \
                f"decay residual {np.max(resid):.2e}"

        ok &= _check(f"{name}: equilibrium fixed point", equilibrium_fixed_point)
        ok &= _check(f"{name}: terminal set invariance and decay", terminal_set_invariant)
        ok &= _check(f"{name}: TD update exceeds one off equilibrium", td_increase)
        ok &= _check(f"{name}: closed-loop value decay", short_loop_decay)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    epilog_lines = ["configuration keys (file or flags; flags win):"]
    for key, (_, help_text) in CONFIG_KEYS.items():
        epilog_lines.append(f"  {key:<18} {help_text}")
    parser = argparse.ArgumentParser(
        prog="shapedmpc",
        description="Terminal-constrained MPC with stage-cost shaping: "
                    "closed loops, sweeps, calibration and self-checks.",
        epilog="\n".join(epilog_lines),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key = value configuration file")
        for key, (_, help_text) in CONFIG_KEYS.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, help=help_text)

    for name, handler, desc in (
        ("run", cmd_run, "single closed loop from one initial state; prints trace and report"),
        ("sweep", cmd_sweep, "grid sweep over initial states; writes cells.csv, summary.csv, contour.svg"),
        ("calibrate", cmd_calibrate, "offline TD calibration of a scalar coefficient"),
        ("check", cmd_check, "run the benchmark invariant suite"),
    ):
        p = sub.add_parser(name, help=desc, description=desc)
        add_common(p)
        p.set_defaults(handler=handler)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.handler(args))
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalDomainError, RiccatiError, NonConvergenceError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
