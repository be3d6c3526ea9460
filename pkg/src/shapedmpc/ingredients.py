"""Stage cost, terminal cost, local controller and terminal-set machinery.

The terminal ingredients follow the standard stabilizing-MPC recipe: a
quadratic value function F(x) = x'Px from a local LQ design, the associated
feedback as local controller, and a sublevel set of F as terminal set.  The
sublevel threshold is validated by sampling (positive invariance plus strict
decay of F) and halved on failure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .dynamics import SystemModel, _freeze

Array = np.ndarray

_DEGENERATE_STAGE = 1e-14
_RICCATI_TOL = 1e-12
_RICCATI_MAX_ITER = 10_000
_LINEARIZE_STEP = 1e-6
_LEVEL_SAMPLES = 1000
_LEVEL_MAX_HALVINGS = 6
_LEVEL_SEED = 1729  # construction-time sampling is deterministic


class RiccatiError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageCost:
    """Per-step penalty l(x, u), zero only at the equilibrium pair.

    ``control_minimizer_at`` returns argmin_a l(x, a), which equals the
    equilibrium control for the costs shipped here.  The vectorized and
    gradient callables are optional fast paths used by the OCP solver.
    """

    evaluate: Callable[[Array, Array], float]
    control_minimizer_at: Callable[[Array], Array]
    grad_x: Optional[Callable[[Array, Array], Array]] = None
    grad_u: Optional[Callable[[Array, Array], Array]] = None
    evaluate_traj: Optional[Callable[[Array, Array], Array]] = None
    grad_x_traj: Optional[Callable[[Array, Array], Array]] = None
    grad_u_traj: Optional[Callable[[Array, Array], Array]] = None
    state_weights: Optional[Array] = None
    control_weights: Optional[Array] = None


def make_quadratic_stage_cost(state_weights, control_weights) -> StageCost:
    """Diagonal quadratic cost sum_i wx_i x_i^2 + sum_j wu_j u_j^2."""
    wx = np.asarray(state_weights, dtype=float)
    wu = np.asarray(control_weights, dtype=float)
    if np.any(wx < 0.0) or np.any(wu <= 0.0):
        raise ValueError("state weights must be nonnegative and control weights strictly positive")
    if not (np.any(wx > 0.0) or np.any(wu > 0.0)):
        raise ValueError("all-zero stage-cost weights rejected")
    ubar = np.zeros(wu.size)

    def evaluate(x: Array, u: Array) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(wx @ (x * x) + wu @ (u * u))

    def evaluate_traj(X: Array, U: Array) -> Array:
        return (X * X) @ wx + (U * U) @ wu

    return StageCost(
        evaluate=evaluate,
        control_minimizer_at=lambda x: ubar.copy(),
        grad_x=lambda x, u: 2.0 * wx * np.asarray(x, dtype=float),
        grad_u=lambda x, u: 2.0 * wu * np.asarray(u, dtype=float),
        evaluate_traj=evaluate_traj,
        grad_x_traj=lambda X, U: 2.0 * wx * X,
        grad_u_traj=lambda X, U: 2.0 * wu * U,
        state_weights=_freeze(wx),
        control_weights=_freeze(wu),
    )


@dataclass(frozen=True)
class TerminalIngredients:
    """Terminal cost F, local controller, and the sublevel set {F <= level}."""

    terminal_cost: Callable[[Array], float]
    local_controller: Callable[[Array], Array]
    level: float
    model: SystemModel
    quadratic_matrix: Optional[Array] = None
    lq_gain: Optional[Array] = None
    grad: Optional[Callable[[Array], Array]] = None
    notes: Tuple[str, ...] = ()

    def contains(self, x: Array, tol: float = 0.0) -> bool:
        return self.terminal_cost(x) <= self.level + tol

    def margin(self, x: Array) -> float:
        """level - F(x); nonnegative inside the terminal set."""
        return self.level - self.terminal_cost(x)

    def scaled(self, beta: float) -> "TerminalIngredients":
        """Replace F by beta * F (level scales along, so the set is unchanged)."""
        if not beta > 0.0:
            raise ValueError("scale factor must be positive")
        F = self.terminal_cost
        g = self.grad
        return TerminalIngredients(
            terminal_cost=lambda x: beta * F(x),
            local_controller=self.local_controller,
            level=beta * self.level,
            model=self.model,
            quadratic_matrix=None if self.quadratic_matrix is None else _freeze(beta * self.quadratic_matrix),
            lq_gain=self.lq_gain,
            grad=None if g is None else (lambda x: beta * g(x)),
            notes=self.notes + (f"scaled:{beta!r}",),
        )


def solve_dare_fixed_point(A: Array, B: Array, Q: Array, R: Array,
                           tol: float = _RICCATI_TOL,
                           max_iter: int = _RICCATI_MAX_ITER) -> Array:
    """Discrete algebraic Riccati equation by fixed-point iteration from P0 = Q."""
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = A.T @ P @ A - (A.T @ P @ B) @ gain + Q
        P_next = 0.5 * (P_next + P_next.T)
        res = float(np.max(np.abs(P_next - P)))
        P = P_next
        if res <= tol:
            return P
    raise RiccatiError(
        f"Riccati fixed-point iteration did not converge within {max_iter} iterations "
        f"(last residual {res:.3e})"
    )


def dare_residual(P: Array, A: Array, B: Array, Q: Array, R: Array) -> float:
    gain = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return float(np.max(np.abs(P - (A.T @ P @ A - (A.T @ P @ B) @ gain + Q))))


def linearize(model: SystemModel, h: float = _LINEARIZE_STEP) -> Tuple[Array, Array]:
    """Central-difference linearization of step at the equilibrium pair."""
    xbar, ubar = model.equilibrium_state, model.equilibrium_control
    nx, nu = model.state_dim, model.control_dim
    A = np.empty((nx, nx))
    B = np.empty((nx, nu))
    for j in range(nx):
        e = np.zeros(nx)
        e[j] = h
        A[:, j] = (model.step(xbar + e, ubar) - model.step(xbar - e, ubar)) / (2.0 * h)
    for j in range(nu):
        e = np.zeros(nu)
        e[j] = h
        B[:, j] = (model.step(xbar, ubar + e) - model.step(xbar, ubar - e)) / (2.0 * h)
    return A, B


def sample_in_level_set(P: Array, level: float, n: int, rng: np.random.Generator) -> Array:
    """Uniform samples of the ellipsoid {z : z'Pz <= level}."""
    nx = P.shape[0]
    L = np.linalg.cholesky(P)
    y = rng.standard_normal((n, nx))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    radii = rng.random(n) ** (1.0 / nx)
    balls = y * radii[:, None]
    return np.sqrt(level) * np.linalg.solve(L.T, balls.T).T


def lq_terminal_ingredients(model: SystemModel, cost: StageCost, level: float = 0.1,
                            samples: int = _LEVEL_SAMPLES,
                            max_halvings: int = _LEVEL_MAX_HALVINGS) -> TerminalIngredients:
    """Local LQ terminal cost/controller with sample-validated sublevel set.

    P solves the DARE for the linearized plant and the quadratic stage-cost
    weights; the controller is u = ubar - K (x - xbar), clipped to the control
    box.  The requested level is halved (at most ``max_halvings`` times) until
    1000 sampled members of the set stay inside under the controller with F
    strictly decreasing.
    """
    if cost.state_weights is None or cost.control_weights is None:
        raise ValueError("LQ terminal synthesis needs a quadratic stage cost with weight vectors")
    if not level > 0.0:
        raise ValueError("terminal level must be positive")

    A, B = linearize(model)
    Q = np.diag(cost.state_weights)
    R = np.diag(cost.control_weights)
    P = solve_dare_fixed_point(A, B, Q, R)
    eigs = np.linalg.eigvalsh(P)
    if np.min(eigs) <= 0.0:
        raise RiccatiError(f"Riccati solution is not positive definite (min eigenvalue {np.min(eigs):.3e})")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)

    xbar, ubar = model.equilibrium_state, model.equilibrium_control
    cbox = model.control_box

    def terminal_cost(x: Array) -> float:
        z = np.asarray(x, dtype=float) - xbar
        return float(z @ P @ z)

    def grad(x: Array) -> Array:
        return 2.0 * (P @ (np.asarray(x, dtype=float) - xbar))

    def local_controller(x: Array) -> Array:
        return cbox.clip(ubar - K @ (np.asarray(x, dtype=float) - xbar))

    notes = []
    rng = np.random.default_rng(_LEVEL_SEED)
    lvl = float(level)
    for _ in range(max_halvings + 1):
        zs = sample_in_level_set(P, lvl, samples, rng)
        ok = True
        for z in zs:
            x = xbar + z
            if not model.state_box.contains(x):
                ok = False
                break
            u = local_controller(x)
            if not np.allclose(u, ubar - K @ z):
                notes.append("controller_clipped_in_level_set")
            xp = model.step(x, u)
            fx, fxp = float(z @ P @ z), terminal_cost(xp)
            if fxp > lvl or not fxp < fx:
                ok = False
                break
        if ok:
            break
        lvl *= 0.5
    else:
        raise RuntimeError(
            f"terminal level validation failed down to {lvl:.3e} "
            f"after {max_halvings} halvings (invariance or decay violated)"
        )
    if lvl != float(level):
        notes.append(f"level_halved_to:{lvl!r}")

    return TerminalIngredients(
        terminal_cost=terminal_cost,
        local_controller=local_controller,
        level=lvl,
        model=model,
        quadratic_matrix=_freeze(P),
        lq_gain=_freeze(K),
        grad=grad,
        notes=tuple(dict.fromkeys(notes)),
    )


def decay_ratio(ti: TerminalIngredients, cost: StageCost, x: Array) -> float:
    """(F(x) - F(x+)) / l(x, mu_F(x)) along the local controller."""
    x = np.asarray(x, dtype=float)
    if not ti.contains(x, tol=1e-12):
        raise ValueError(f"state with F(x) = {ti.terminal_cost(x):.6g} lies outside the terminal set")
    u = ti.local_controller(x)
    stage = cost.evaluate(x, u)
    if stage <= _DEGENERATE_STAGE:
        raise ValueError("equilibrium degenerate ratio: stage cost vanishes at this state")
    xp = ti.model.step(x, u)
    return (ti.terminal_cost(x) - ti.terminal_cost(xp)) / stage
