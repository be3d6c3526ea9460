"""Initial-condition grid sweeps, parallel execution and result emission.

Every grid cell runs the baseline and shaped closed loops from the same
initial state; cells are independent, keyed by index, and reassembled in grid
order, so results are identical regardless of worker count.  Specs hold only
primitives so they cross process boundaries cheaply; each worker rebuilds the
models itself.
"""

from __future__ import annotations

import csv
import math
import multiprocessing as mp
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .analysis import build_report, estimate_v_infinity
from .closed_loop import LoopConfig, run_closed_loop
from .dynamics import make_benchmark
from .ingredients import lq_terminal_ingredients, make_quadratic_stage_cost
from .ocp import SolverSettings

Array = np.ndarray

# per-benchmark configuration from the simulation study
BENCHMARK_DEFAULTS: Dict[str, dict] = {
    "msd": dict(horizon=10, c0=5.0, state_weights=(1.0, 1.0), control_weights=(1.0,),
                coeff_lower_bound=None, grid_min=(-1.0, -1.0), grid_max=(1.0, 1.0)),
    "primbs": dict(horizon=5, c0=20.0, state_weights=(0.0, 1.0), control_weights=(1.0,),
                   coeff_lower_bound=1.0, grid_min=(-5.0, -5.0), grid_max=(5.0, 5.0)),
}


@dataclass(frozen=True)
class SweepSpec:
    benchmark: str
    grid_min: Tuple[float, float]
    grid_max: Tuple[float, float]
    grid_points: Tuple[int, int] = (41, 41)
    horizon: int = 10
    c0: float = 1.0
    update_rule: str = "td_constrained"
    coeff_lower_bound: Optional[float] = None
    terminal_level: float = 0.1
    state_weights: Tuple[float, ...] = (1.0, 1.0)
    control_weights: Tuple[float, ...] = (1.0,)
    max_steps: int = 400
    stop_norm: float = 1e-6
    tail_tol: float = 1e-10
    workers: int = 1
    include_report: bool = False
    surrogate_horizon: int = 60
    ocp_tol: float = 1e-8
    ocp_max_iter: int = 5000
    multistart: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.benchmark not in BENCHMARK_DEFAULTS:
            raise ValueError(f"unknown benchmark {self.benchmark!r}")
        if any(p < 2 for p in self.grid_points):
            raise ValueError("grid needs at least 2 points per dimension")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def solver_settings(self) -> SolverSettings:
        return SolverSettings(tol=self.ocp_tol, max_iter=self.ocp_max_iter,
                              multistart=self.multistart, seed=self.seed)

    def grid(self) -> List[Tuple[float, float]]:
        """Row-major cell centers: dim 0 varies slowest."""
        ax0 = np.linspace(self.grid_min[0], self.grid_max[0], self.grid_points[0])
        ax1 = np.linspace(self.grid_min[1], self.grid_max[1], self.grid_points[1])
        return [(float(a), float(b)) for a in ax0 for b in ax1]


def default_sweep_spec(benchmark: str, **overrides) -> SweepSpec:
    base = BENCHMARK_DEFAULTS[benchmark].copy()
    base.update(overrides)
    return SweepSpec(benchmark=benchmark, **base)


CELL_FIELDS = ("x0_0", "x0_1", "shaped_cost", "baseline_cost", "cost_diff",
               "shaped_converged", "baseline_converged", "delta0", "gamma0",
               "delta_l_sum", "bound6_slack", "flags")


@dataclass(frozen=True, eq=False)
class CellResult:
    x0_0: float
    x0_1: float
    shaped_cost: float
    baseline_cost: float
    cost_diff: float          # baseline - shaped; positive means shaped is better
    shaped_converged: bool
    baseline_converged: bool
    delta0: float
    gamma0: float
    delta_l_sum: float
    bound6_slack: float
    flags: str = ""

    @property
    def failed(self) -> bool:
        return not (self.shaped_converged and self.baseline_converged)

    def __eq__(self, other) -> bool:
        # bitwise-identical fields; NaN placeholders compare equal to NaN
        if not isinstance(other, CellResult):
            return NotImplemented
        for f in CELL_FIELDS:
            a, b = getattr(self, f), getattr(other, f)
            if isinstance(a, float) and isinstance(b, float):
                if a != b and not (math.isnan(a) and math.isnan(b)):
                    return False
            elif a != b:
                return False
        return True

    def __hash__(self):
        return hash((self.x0_0, self.x0_1))


@dataclass(frozen=True)
class SweepResult:
    spec: SweepSpec
    cells: Tuple[CellResult, ...]
    fraction_shaped_better: float
    fraction_baseline_better: float
    fraction_failed: float


def _aggregate(spec: SweepSpec, cells: Sequence[CellResult]) -> SweepResult:
    total = len(cells)
    failed = sum(1 for c in cells if c.failed)
    shaped = sum(1 for c in cells if not c.failed and c.cost_diff > 0.0)
    baseline = sum(1 for c in cells if not c.failed and c.cost_diff < 0.0)
    return SweepResult(
        spec=spec,
        cells=tuple(cells),
        fraction_shaped_better=shaped / total,
        fraction_baseline_better=baseline / total,
        fraction_failed=failed / total,
    )


def _build_stack(spec: SweepSpec):
    model = make_benchmark(spec.benchmark)
    cost = make_quadratic_stage_cost(spec.state_weights, spec.control_weights)
    ingredients = lq_terminal_ingredients(model, cost, level=spec.terminal_level)
    solver = spec.solver_settings()
    shaped_cfg = LoopConfig(controller="shaped", horizon=spec.horizon,
                            initial_coefficients=spec.c0, update_rule=spec.update_rule,
                            max_steps=spec.max_steps, stop_norm=spec.stop_norm,
                            tail_tol=spec.tail_tol, coeff_lower_bound=spec.coeff_lower_bound,
                            solver=solver)
    baseline_cfg = LoopConfig(controller="baseline", horizon=spec.horizon,
                              update_rule="frozen", max_steps=spec.max_steps,
                              stop_norm=spec.stop_norm, tail_tol=spec.tail_tol,
                              solver=solver)
    return model, cost, ingredients, shaped_cfg, baseline_cfg


def _evaluate_cell(stack, spec: SweepSpec, x0: Tuple[float, float]) -> CellResult:
    model, cost, ingredients, shaped_cfg, baseline_cfg = stack
    x = np.array(x0, dtype=float)
    flags: List[str] = []
    nan = float("nan")
    try:
        shaped = run_closed_loop(model, cost, ingredients, shaped_cfg, x)
        baseline = run_closed_loop(model, cost, ingredients, baseline_cfg, x)
    except Exception as err:  # per-cell failures are recorded, never fatal
        return CellResult(x0[0], x0[1], nan, nan, nan, False, False,
                          nan, nan, nan, nan, flags=f"error:{type(err).__name__}")
    if shaped.infeasible_at is not None:
        flags.append(f"shaped_infeasible_at:{shaped.infeasible_at}")
    if baseline.infeasible_at is not None:
        flags.append(f"baseline_infeasible_at:{baseline.infeasible_at}")

    delta0 = gamma0 = dls = bound6 = nan
    if spec.include_report and shaped.converged and baseline.converged:
        try:
            v_inf = estimate_v_infinity(model, cost, ingredients, x,
                                        surrogate_horizon=spec.surrogate_horizon,
                                        solver=spec.solver_settings())
            report = build_report(shaped, baseline, v_inf)
            delta0, gamma0 = report.delta0, report.gamma0
            dls, bound6 = report.delta_l_sum, report.bound6_slack
            flags.extend(report.flags)
        except Exception as err:
            flags.append(f"report_error:{type(err).__name__}")

    return CellResult(
        x0_0=x0[0], x0_1=x0[1],
        shaped_cost=shaped.accumulated_cost,
        baseline_cost=baseline.accumulated_cost,
        cost_diff=baseline.accumulated_cost - shaped.accumulated_cost,
        shaped_converged=bool(shaped.converged),
        baseline_converged=bool(baseline.converged),
        delta0=delta0, gamma0=gamma0, delta_l_sum=dls, bound6_slack=bound6,
        flags=";".join(flags),
    )


def _worker(args) -> List[Tuple[int, CellResult]]:
    spec, indexed_cells = args
    stack = _build_stack(spec)
    return [(idx, _evaluate_cell(stack, spec, x0)) for idx, x0 in indexed_cells]


def run_sweep(spec: SweepSpec) -> SweepResult:
    """Run the full grid; deterministic and keyed by cell regardless of workers."""
    cells = list(enumerate(spec.grid()))
    if spec.workers == 1:
        results = _worker((spec, cells))
    else:
        chunks = [cells[i::spec.workers] for i in range(spec.workers)]
        chunks = [c for c in chunks if c]
        ctx = mp.get_context("fork")
        with ctx.Pool(processes=len(chunks)) as pool:
            parts = pool.map(_worker, [(spec, chunk) for chunk in chunks])
        results = [item for part in parts for item in part]
    results.sort(key=lambda item: item[0])
    return _aggregate(spec, [cell for _, cell in results])


# ---------------------------------------------------------------------------
# emission

def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def emit_results(result: SweepResult, out_dir) -> Dict[str, Path]:
    """Write cells.csv, summary.csv and contour.svg into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "cells": out / "cells.csv",
            "summary": out / "summary.csv",
            "contour": out / "contour.svg",
        }
        with paths["cells"].open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CELL_FIELDS)
            for c in result.cells:
                writer.writerow([_fmt(getattr(c, f)) for f in CELL_FIELDS])
        with paths["summary"].open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["key", "value"])
            writer.writerow(["benchmark", result.spec.benchmark])
            writer.writerow(["grid_points", f"{result.spec.grid_points[0]}x{result.spec.grid_points[1]}"])
            writer.writerow(["cells", len(result.cells)])
            writer.writerow(["fraction_shaped_better", repr(result.fraction_shaped_better)])
            writer.writerow(["fraction_baseline_better", repr(result.fraction_baseline_better)])
            writer.writerow(["fraction_failed", repr(result.fraction_failed)])
        paths["contour"].write_text(render_contour_svg(result))
        return paths
    except OSError as err:
        raise OSError(f"failed writing sweep results under {out}: {err}") from err


def parse_cells_csv(path) -> Tuple[CellResult, ...]:
    """Inverse of the cells.csv emission (floats round-trip via repr)."""
    cells = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CELL_FIELDS:
            raise ValueError(f"unexpected cells.csv header in {path}")
        for row in reader:
            cells.append(CellResult(
                x0_0=float(row["x0_0"]), x0_1=float(row["x0_1"]),
                shaped_cost=float(row["shaped_cost"]),
                baseline_cost=float(row["baseline_cost"]),
                cost_diff=float(row["cost_diff"]),
                shaped_converged=row["shaped_converged"] == "True",
                baseline_converged=row["baseline_converged"] == "True",
                delta0=float(row["delta0"]), gamma0=float(row["gamma0"]),
                delta_l_sum=float(row["delta_l_sum"]),
                bound6_slack=float(row["bound6_slack"]),
                flags=row["flags"],
            ))
    return tuple(cells)


def _diverging_color(t: float) -> str:
    """t in [-1, 1]: negative fades white->yellow, positive white->blue."""
    t = max(-1.0, min(1.0, t))
    if t >= 0.0:
        r, g, b = 1.0 - 0.87 * t, 1.0 - 0.60 * t, 1.0 - 0.33 * t
    else:
        s = -t
        r, g, b = 1.0 - 0.07 * s, 1.0 - 0.20 * s, 1.0 - 0.85 * s
    return f"#{int(255 * r):02x}{int(255 * g):02x}{int(255 * b):02x}"


def render_contour_svg(result: SweepResult, cell_px: int = 14) -> str:
    """Filled-grid rendering of cost_diff with a diverging scale centered at 0."""
    n0, n1 = result.spec.grid_points
    diffs = np.array([c.cost_diff for c in result.cells])
    finite = diffs[np.isfinite(diffs)]
    vmax = float(np.max(np.abs(finite))) if finite.size and np.max(np.abs(finite)) > 0 else 1.0

    margin, bar_w = 46, 18
    width = n0 * cell_px + margin * 2 + bar_w + 42
    height = n1 * cell_px + margin * 2
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for idx, c in enumerate(result.cells):
        i, j = divmod(idx, n1)
        x = margin + i * cell_px
        y = margin + (n1 - 1 - j) * cell_px
        if not math.isfinite(c.cost_diff) or c.failed:
            fill = "#bbbbbb"
        else:
            fill = _diverging_color(c.cost_diff / vmax)
        parts.append(f'<rect x="{x}" y="{y}" width="{cell_px}" height="{cell_px}" fill="{fill}"/>')
    # colorbar: blue above the midline (shaped better), yellow below
    bar_x = margin + n0 * cell_px + 16
    bar_h = n1 * cell_px
    steps = 24
    for s in range(steps):
        t = 1.0 - 2.0 * (s + 0.5) / steps
        y = margin + s * bar_h / steps
        parts.append(f'<rect x="{bar_x}" y="{y:.2f}" width="{bar_w}" '
                     f'height="{bar_h / steps + 0.5:.2f}" fill="{_diverging_color(t)}"/>')
    label = 'font-family="sans-serif" font-size="10"'
    parts.append(f'<text x="{bar_x + bar_w + 4}" y="{margin + 8}" {label}>+{vmax:.3g}</text>')
    parts.append(f'<text x="{bar_x + bar_w + 4}" y="{margin + bar_h / 2 + 4}" {label}>0</text>')
    parts.append(f'<text x="{bar_x + bar_w + 4}" y="{margin + bar_h}" {label}>-{vmax:.3g}</text>')
    parts.append(f'<text x="{margin}" y="{margin - 8}" {label}>cost difference '
                 f'(baseline - shaped), {result.spec.benchmark}</text>')
    parts.append(f'<text x="{margin}" y="{height - 10}" {label}>x0[0]: '
                 f'{result.spec.grid_min[0]:g} .. {result.spec.grid_max[0]:g}, x0[1]: '
                 f'{result.spec.grid_min[1]:g} .. {result.spec.grid_max[1]:g}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
