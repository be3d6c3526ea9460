"""Receding-horizon engine: solve, update coefficients, apply, advance.

One engine serves both controllers; the baseline is the shaped scheme with
coefficients pinned at one and no update, so the two produce bit-identical
traces in that configuration by construction.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .dynamics import SystemModel
from .ingredients import StageCost, TerminalIngredients
from .ocp import (NumericalDomainError, OcpProblem, SolverSettings,
                  evaluate_candidate, solve, warm_start_shift)
from .shaping import (DEGENERATE_STAGE, CoefficientVector, allocation_update,
                      build_constraint_data, constant_coefficients, critic_update,
                      w_membership)

Array = np.ndarray

CONTROLLERS = ("baseline", "shaped")
UPDATE_RULES = ("td_constrained", "allocation", "frozen")
# the shifted candidate inherits the solver feasibility tolerance plus one
# local-controller step of drift, so it is verified one order looser
CANDIDATE_FEAS_TOL = 1e-7


@dataclass(frozen=True)
class LoopConfig:
    controller: str = "shaped"
    horizon: int = 10
    initial_coefficients: float | Sequence[float] = 1.0
    update_rule: str = "td_constrained"
    max_steps: int = 400
    stop_norm: float = 1e-6
    tail_tol: float = 1e-10
    coeff_lower_bound: Optional[float] = None
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"unknown update rule {self.update_rule!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.stop_norm < 0.0 or self.tail_tol < 0.0:
            raise ValueError("stop thresholds must be nonnegative")

    def initial_coefficient_vector(self) -> CoefficientVector:
        if self.controller == "baseline":
            return constant_coefficients(1.0, self.horizon)
        c0 = self.initial_coefficients
        if np.isscalar(c0):
            return constant_coefficients(float(c0), self.horizon)
        return CoefficientVector(np.asarray(c0, dtype=float), origin="initial")


@dataclass(frozen=True)
class ClosedLoopTrace:
    controller: str
    update_rule: str
    horizon: int
    states: Array              # (K+1, nx), chained under the model
    controls: Array            # (K, nu), first element of each OCP solution
    coefficients: Array        # (K, N), the vector used at each step
    stage_costs: Array         # (K,)  l(x_k, u_k)
    values: Array              # (K,)  shaped OCP value at each step
    w_slacks: Array            # (K,)  slack of c_{k+1} in the step-k stability set
    alpha_ratios: Array        # (K,)  terminal decay ratio, nan when degenerate
    ratio_monitor: Array       # (K,)  successor/current stage-cost ratio, nan when degenerate
    feasible: Array            # (K,)  bool, OCP + shifted-candidate feasibility
    step_flags: Tuple[Tuple[str, ...], ...]
    converged: bool
    steps: int
    accumulated_cost: float
    terminal_tail_estimate: float   # F(x_final); reported separately, never added
    infeasible_at: Optional[int] = None

    @property
    def initial_value(self) -> float:
        return float(self.values[0]) if self.steps > 0 else 0.0

    @property
    def initial_state(self) -> Array:
        return self.states[0]

    @property
    def max_alpha(self) -> float:
        finite = self.alpha_ratios[np.isfinite(self.alpha_ratios)]
        return float(np.max(finite)) if finite.size else float("nan")

    @property
    def max_ratio_monitor(self) -> float:
        finite = self.ratio_monitor[np.isfinite(self.ratio_monitor)]
        return float(np.max(finite)) if finite.size else float("nan")

    def delta_l_sum(self) -> float:
        """Sum of (c_k(0) - 1) * l(x_k, u_k) over the trace."""
        if self.steps == 0:
            return 0.0
        return float((self.coefficients[:, 0] - 1.0) @ self.stage_costs)


def run_closed_loop(model: SystemModel, cost: StageCost, ingredients: TerminalIngredients,
                    config: LoopConfig, x0: Array) -> ClosedLoopTrace:
    """Execute the receding-horizon scheme from x0 and record everything.

    Order per step: solve the weighted OCP, update the coefficients under the
    stability set (shaped only), then apply the first control.  Updated
    coefficients take effect at the next step.  A mid-run solver infeasibility
    truncates the trace with an explicit flag.
    """
    x = np.asarray(x0, dtype=float)
    if not model.state_box.contains(x, tol=1e-12):
        raise ValueError("initial state lies outside the state box")
    nx, nu, N = model.state_dim, model.control_dim, config.horizon
    ubar = model.equilibrium_control
    xbar = model.equilibrium_state

    coeffs = config.initial_coefficient_vector()
    frozen = config.controller == "baseline" or config.update_rule == "frozen"

    states = [x.copy()]
    controls, coeff_rows, stages, values = [], [], [], []
    w_slacks, alphas, ratios, feas, flag_rows = [], [], [], [], []
    converged = False
    infeasible_at: Optional[int] = None
    warm: Optional[Array] = None
    lam_hint = 0.0

    for k in range(config.max_steps):
        if (ingredients.contains(x) and cost.evaluate(x, ubar) < config.tail_tol
                and float(np.linalg.norm(x - xbar)) < config.stop_norm):
            converged = True
            break

        problem = OcpProblem(model=model, cost=cost, terminal=ingredients,
                             horizon=N, coefficients=coeffs.values, initial_state=x)
        step_flags = []
        shift_ok = True
        if warm is not None:
            cand = evaluate_candidate(problem, warm)
            shift_ok = (cand.terminal_margin >= -CANDIDATE_FEAS_TOL
                        and cand.box_margin >= -CANDIDATE_FEAS_TOL)
            if not shift_ok:
                step_flags.append("shift_candidate_infeasible")

        try:
            sol = solve(problem, warm_start=warm, settings=config.solver,
                        multiplier_hint=lam_hint)
        except NumericalDomainError as err:
            raise NumericalDomainError(f"step {k}: {err}") from err
        # a hint only helps while the terminal constraint stays active
        lam_hint = sol.terminal_multiplier if sol.terminal_margin < 0.1 * ingredients.level else 0.0
        if not sol.converged:
            infeasible_at = k
            break

        u0 = sol.controls[0].copy()
        stage = cost.evaluate(x, u0)
        data = build_constraint_data(sol, coeffs, ingredients, cost)
        if frozen:
            coeffs_next = coeffs
        elif config.update_rule == "allocation":
            coeffs_next = allocation_update(coeffs, data)
        else:
            coeffs_next = critic_update(coeffs, sol.states, sol.controls, model, cost,
                                        data, lower_bound=config.coeff_lower_bound)
        step_flags.extend(coeffs_next.flags)

        states_next = model.step(x, u0)
        if not np.all(np.isfinite(states_next)):
            raise NumericalDomainError(f"step {k}: dynamics produced NaN/Inf")

        controls.append(u0)
        coeff_rows.append(coeffs.values.copy())
        stages.append(stage)
        values.append(sol.value)
        w_slacks.append(w_membership(coeffs_next, data))
        alphas.append(data.terminal_drop / data.terminal_stage
                      if data.terminal_stage > DEGENERATE_STAGE else np.nan)
        succ = cost.evaluate(states_next, ubar)
        ratios.append(succ / stage if stage > DEGENERATE_STAGE else np.nan)
        feas.append(sol.converged and shift_ok)
        flag_rows.append(tuple(step_flags))

        warm = warm_start_shift(sol, ingredients)
        x = states_next
        states.append(x.copy())
        coeffs = coeffs_next
    else:
        # max_steps exhausted; final state may still satisfy the stop criteria
        converged = (ingredients.contains(x) and cost.evaluate(x, ubar) < config.tail_tol
                     and float(np.linalg.norm(x - xbar)) < config.stop_norm)

    K = len(controls)
    return ClosedLoopTrace(
        controller=config.controller,
        update_rule=config.update_rule,
        horizon=N,
        states=np.asarray(states).reshape(K + 1, nx),
        controls=np.asarray(controls).reshape(K, nu),
        coefficients=np.asarray(coeff_rows).reshape(K, N),
        stage_costs=np.asarray(stages, dtype=float),
        values=np.asarray(values, dtype=float),
        w_slacks=np.asarray(w_slacks, dtype=float),
        alpha_ratios=np.asarray(alphas, dtype=float),
        ratio_monitor=np.asarray(ratios, dtype=float),
        feasible=np.asarray(feas, dtype=bool),
        step_flags=tuple(flag_rows),
        converged=converged and infeasible_at is None,
        steps=K,
        accumulated_cost=float(np.sum(stages)) if K else 0.0,
        terminal_tail_estimate=float(ingredients.terminal_cost(x)),
        infeasible_at=infeasible_at,
    )


def decay_check(trace: ClosedLoopTrace) -> Array:
    """Per-step decay residuals V(k+1) - V(k) + c_k(0) l_k (expected <= 0)."""
    if trace.steps < 2:
        return np.zeros(0)
    V = trace.values
    return V[1:] - V[:-1] + trace.coefficients[:-1, 0] * trace.stage_costs[:-1]


def trace_to_csv(trace: ClosedLoopTrace) -> str:
    """One row per step: k, x[..], u[..], c[..], stage cost, value, diagnostics."""
    nx = trace.states.shape[1]
    nu = trace.controls.shape[1] if trace.steps else 1
    N = trace.horizon
    residuals = decay_check(trace)
    buf = io.StringIO()
    header = (["k"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)]
              + [f"c{i}" for i in range(N)]
              + ["stage_cost", "value", "decay_residual", "w_slack", "feasible"])
    buf.write(",".join(header) + "\n")
    for k in range(trace.steps):
        row = [str(k)]
        row += [repr(float(v)) for v in trace.states[k]]
        row += [repr(float(v)) for v in trace.controls[k]]
        row += [repr(float(v)) for v in trace.coefficients[k]]
        row.append(repr(float(trace.stage_costs[k])))
        row.append(repr(float(trace.values[k])))
        row.append(repr(float(residuals[k])) if k < residuals.size else "nan")
        row.append(repr(float(trace.w_slacks[k])))
        row.append(str(bool(trace.feasible[k])))
        buf.write(",".join(row) + "\n")
    return buf.getvalue()
