"""Coefficient management for the shaped stage cost.

Three update routes are provided: the per-index TD closed form, the
constrained critic least squares (the TD objective restricted to the
stability set), and the shift-and-append allocation rule that satisfies the
stability inequality by construction.  An offline scalar TD calibration over
state-input samples supplies initial coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .dynamics import SystemModel
from .ingredients import StageCost, TerminalIngredients
from .ocp import OcpSolution

Array = np.ndarray

DEGENERATE_STAGE = 1e-14
POSITIVITY_FLOOR = 1e-14
COEFF_CAP = 1e6
W_SLACK_TOL = 1e-10

ORIGINS = ("initial", "td_closed_form", "critic_qp", "allocation")


class NonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class CoefficientVector:
    """Strictly positive stage-cost weights with update-rule provenance."""

    values: Array
    origin: str = "initial"
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if v.ndim != 1 or v.size == 0:
            raise ValueError("coefficient vector must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
            raise ValueError("coefficients must be strictly positive and finite")

    def __len__(self) -> int:
        return self.values.size


def constant_coefficients(value: float, horizon: int) -> CoefficientVector:
    return CoefficientVector(np.full(horizon, float(value)), origin="initial")


@dataclass(frozen=True)
class StabilityConstraintData:
    """Time-k trajectory data entering the stability inequality for c_{k+1}.

    ``stage_costs[j]`` is l(x*(j+1), u*(j+1)) for j = 0..N-2, i.e. the
    predicted stage costs at indices 1..N-1; ``terminal_drop`` is the decrease
    of F over one local-controller step from x*(N) and ``terminal_stage`` the
    stage cost of that step.
    """

    stage_costs: Array
    prev_coeffs: CoefficientVector
    terminal_state: Array
    terminal_drop: float
    terminal_stage: float

    def __post_init__(self):
        s = np.asarray(self.stage_costs, dtype=float).copy()
        s.setflags(write=False)
        object.__setattr__(self, "stage_costs", s)
        object.__setattr__(self, "terminal_state", np.asarray(self.terminal_state, dtype=float))
        if np.any(s < 0.0) or self.terminal_stage < 0.0:
            raise ValueError("stage costs must be nonnegative")
        if s.size != len(self.prev_coeffs) - 1:
            raise ValueError("need exactly N-1 interior stage costs")


def build_constraint_data(solution: OcpSolution, coeffs: CoefficientVector,
                          ingredients: TerminalIngredients, cost: StageCost) -> StabilityConstraintData:
    """Extract the stability-set data from a solved time-k trajectory."""
    X, U = solution.states, solution.controls
    N = U.shape[0]
    interior = np.array([cost.evaluate(X[i], U[i]) for i in range(1, N)])
    xN = X[N]
    uf = ingredients.local_controller(xN)
    xNp = ingredients.model.step(xN, uf)
    return StabilityConstraintData(
        stage_costs=interior,
        prev_coeffs=coeffs,
        terminal_state=xN,
        terminal_drop=float(ingredients.terminal_cost(xN) - ingredients.terminal_cost(xNp)),
        terminal_stage=float(cost.evaluate(xN, uf)),
    )


def _constraint_halfspace(data: StabilityConstraintData) -> Tuple[Array, float]:
    """The stability inequality as a . C + b <= 0 over candidates C."""
    N = len(data.prev_coeffs)
    a = np.empty(N)
    a[: N - 1] = data.stage_costs
    a[N - 1] = data.terminal_stage
    b = -float(data.prev_coeffs.values[1:] @ data.stage_costs) - data.terminal_drop
    return a, b


def w_membership(candidate: CoefficientVector, data: StabilityConstraintData) -> float:
    """Signed slack of the stability inequality; membership iff slack <= 1e-10."""
    if len(candidate) != len(data.prev_coeffs):
        raise ValueError("candidate and previous coefficient lengths disagree")
    a, b = _constraint_halfspace(data)
    return float(a @ candidate.values + b)


def _finalize(values: Array, origin: str, flags: Iterable[str]) -> CoefficientVector:
    flags = list(flags)
    values = np.asarray(values, dtype=float).copy()
    if np.any(values > COEFF_CAP):
        values = np.minimum(values, COEFF_CAP)
        flags.append("capped")
    if np.any(values < POSITIVITY_FLOOR):
        values = np.maximum(values, POSITIVITY_FLOOR)
        flags.append("boundary_hit")
    return CoefficientVector(values, origin=origin, flags=tuple(dict.fromkeys(flags)))


def td_ratios(states: Array, controls: Array, model: SystemModel, cost: StageCost) -> Tuple[Array, Array]:
    """Per-index stage costs l_i and successor costs l(x_{i+1}, ubar)."""
    N = controls.shape[0]
    ubar = model.equilibrium_control
    stage = np.array([cost.evaluate(states[i], controls[i]) for i in range(N)])
    successor = np.array([cost.evaluate(states[i + 1], ubar) for i in range(N)])
    return stage, successor


def td_update_closed_form(coeffs: CoefficientVector, states: Array, controls: Array,
                          model: SystemModel, cost: StageCost) -> CoefficientVector:
    """One-step TD update per index: c+ = 1 + c * l(x_{i+1}, ubar) / l(x_i, u_i).

    Indices with vanishing stage cost carry the previous coefficient over
    unchanged (any positive value is consistent with the TD objective there).
    """
    stage, successor = td_ratios(states, controls, model, cost)
    out = np.empty(len(coeffs))
    flags = []
    for i in range(len(coeffs)):
        if stage[i] <= DEGENERATE_STAGE:
            out[i] = coeffs.values[i]
            flags.append("carry_over")
        else:
            out[i] = 1.0 + coeffs.values[i] * successor[i] / stage[i]
    return _finalize(out, "td_closed_form", flags)


def _equality_ls(stage: Array, beta: Array, a: Array, rhs: float,
                 free: Array, fixed_vals: Array) -> Optional[Array]:
    """Minimize sum (beta - C l)^2 over the free entries with a . C = rhs.

    Returns None when the free entries cannot move the constraint (all their
    coefficients in ``a`` vanish).
    """
    C = fixed_vals.copy()
    af, lf, bf = a[free], stage[free], beta[free]
    denom = float(np.sum((af / lf) ** 2))
    if denom <= 0.0:
        return None
    resid = rhs - float(a[~free] @ fixed_vals[~free]) if np.any(~free) else rhs
    lam = 2.0 * (float(np.sum(af * bf / lf)) - resid) / denom
    C[free] = bf / lf - lam * af / (2.0 * lf * lf)
    return C


def critic_update(coeffs: CoefficientVector, states: Array, controls: Array,
                  model: SystemModel, cost: StageCost,
                  constraint: StabilityConstraintData,
                  lower_bound: Optional[float] = None) -> CoefficientVector:
    """Constrained critic least squares over all coefficients.

    Minimizes the squared TD residuals subject to the stability half-space
    and positivity (plus an optional uniform lower bound).  Solved by
    active-set enumeration: with the half-space inactive the solution is the
    per-index closed form; with it active, an equality-constrained least
    squares with bound violations clipped and re-solved at most N times.  When
    every variable ends up at its bound the all-bounds point decides
    feasibility; a genuinely empty feasible set (possible only when the
    terminal drop is negative) falls back to the allocation rule with a flag.
    """
    N = len(coeffs)
    stage, successor = td_ratios(states, controls, model, cost)
    beta = stage + coeffs.values * successor
    lb = POSITIVITY_FLOOR if lower_bound is None else max(float(lower_bound), POSITIVITY_FLOOR)

    free = stage > DEGENERATE_STAGE
    C = np.maximum(coeffs.values, lb)              # degenerate entries carry over
    C[free] = np.maximum(beta[free] / stage[free], lb)
    flags = ["carry_over"] if np.any(~free) else []

    a, b = _constraint_halfspace(constraint)
    if float(a @ C + b) <= W_SLACK_TOL:
        return _finalize(C, "critic_qp", flags)

    def _active_set(fixed_vals: Array) -> Optional[Array]:
        """Equality-constrained LS with progressive flooring of violations."""
        active = free.copy()
        for _ in range(N + 1):
            sol = _equality_ls(stage, beta, a, -b, active, fixed_vals) \
                if np.any(active) else None
            if sol is None:
                # no free direction moves the constraint; the bound point decides
                sol = fixed_vals.copy()
                return sol
            below = active & (sol < lb)
            if not np.any(below):
                return sol
            fixed_vals = fixed_vals.copy()
            fixed_vals[below] = lb
            active &= ~below
        return None

    # first pass keeps the carried values at degenerate indices; when the
    # carried mass itself blocks the half-space, a second pass releases those
    # entries to the bound (they carry no objective weight, so the reduction
    # is free)
    sol = _active_set(C.copy())
    if sol is None or float(a @ sol + b) > W_SLACK_TOL or np.any(sol < lb - 1e-12):
        released = C.copy()
        released[~free] = lb
        sol = _active_set(released)
        if sol is not None and float(a @ sol + b) <= W_SLACK_TOL:
            flags.append("carry_reduced")

    if sol is not None and float(a @ sol + b) <= W_SLACK_TOL and np.all(sol >= lb - 1e-12):
        sol = np.maximum(sol, lb)
        if np.any(sol[free] <= lb * (1.0 + 1e-9)):
            flags.append("boundary_hit" if lower_bound is None else "lower_bound_active")
        return _finalize(sol, "critic_qp", flags)

    # feasible set empty within the bounds: allocate and flag
    fallback = allocation_update(coeffs, constraint)
    return _finalize(fallback.values, "allocation", list(fallback.flags) + ["critic_infeasible_fallback"])


def allocation_update(coeffs: CoefficientVector,
                      constraint: StabilityConstraintData) -> CoefficientVector:
    """Shift the coefficients forward and append the terminal decay ratio.

    Satisfies the stability inequality with zero slack by construction.  A
    degenerate terminal stage cost (trajectory already at the equilibrium)
    carries the previous coefficients over with a flag.
    """
    N = len(coeffs)
    if constraint.terminal_stage <= DEGENERATE_STAGE:
        return _finalize(coeffs.values, "allocation", ["carry_over"])
    alpha = constraint.terminal_drop / constraint.terminal_stage
    flags = []
    if alpha <= 0.0:
        # terminal cost failed to decay on this sample; keep positivity, flag loudly
        alpha = POSITIVITY_FLOOR
        flags.append("nonpositive_ratio")
    out = np.empty(N)
    out[: N - 1] = coeffs.values[1:]
    out[N - 1] = alpha
    return _finalize(out, "allocation", flags)


def offline_td_calibrate(model: SystemModel, cost: StageCost,
                         samples: Sequence[Tuple[Array, Array]],
                         tolerance: float = 1e-10, max_sweeps: int = 10_000,
                         w0: float = 0.0) -> float:
    """Scalar TD weight from iterated least squares over (x, u) samples.

    Iterates w <- sum l (l + w l') / sum l^2 with l' the successor stage cost
    at the equilibrium control, until successive iterates differ by at most
    ``tolerance``.  Divergence past 1e6 raises with the recent iterate trail.
    """
    ubar = model.equilibrium_control
    l = np.array([cost.evaluate(x, u) for x, u in samples])
    lp = np.array([cost.evaluate(model.step(x, u), ubar) for x, u in samples])
    keep = l > DEGENERATE_STAGE
    if not np.any(keep):
        raise ValueError("degenerate sample set: every stage cost vanishes")
    l, lp = l[keep], lp[keep]
    denom = float(l @ l)
    w = float(w0)
    trail = [w]
    for _ in range(max_sweeps):
        w_next = float(l @ (l + w * lp)) / denom
        trail.append(w_next)
        if abs(w_next) > 1e6:
            raise NonConvergenceError(
                f"offline TD iteration diverged (|w| > 1e6); last iterates {trail[-5:]}"
            )
        if abs(w_next - w) <= tolerance:
            return w_next
        w = w_next
    raise NonConvergenceError(
        f"offline TD iteration did not converge in {max_sweeps} sweeps; last iterates {trail[-5:]}"
    )
