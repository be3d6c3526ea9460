"""Discrete-time system models and the two benchmark plants.

A :class:`SystemModel` is an immutable bundle of a one-step map, box
constraints and the (unique) equilibrium pair.  Benchmarks are built by
explicit-Euler discretization of a continuous right-hand side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

Array = np.ndarray

# equilibrium fixed-point gate at construction time
_EQUILIBRIUM_RESIDUAL_MAX = 1e-9
_FD_STEP = 1e-6


def _freeze(a) -> Array:
    out = np.asarray(a, dtype=float).copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Box:
    """Per-dimension closed interval bounds."""

    lower: Array
    upper: Array

    def __post_init__(self):
        object.__setattr__(self, "lower", _freeze(np.atleast_1d(self.lower)))
        object.__setattr__(self, "upper", _freeze(np.atleast_1d(self.upper)))
        if self.lower.shape != self.upper.shape:
            raise ValueError("box bounds must have matching shapes")
        if np.any(self.lower > self.upper):
            raise ValueError("box lower bound exceeds upper bound")

    @property
    def dim(self) -> int:
        return self.lower.size

    def margin(self, v: Array) -> float:
        """Smallest slack to any face; negative means outside the box."""
        v = np.asarray(v, dtype=float)
        return float(min(np.min(v - self.lower), np.min(self.upper - v)))

    def contains(self, v: Array, tol: float = 0.0) -> bool:
        return self.margin(v) >= -tol

    def contains_strict(self, v: Array) -> bool:
        return self.margin(v) > 0.0

    def clip(self, v: Array) -> Array:
        return np.clip(np.asarray(v, dtype=float), self.lower, self.upper)


@dataclass(frozen=True)
class SystemModel:
    """Immutable discrete-time plant x+ = step(x, u) with admissible boxes."""

    state_dim: int
    control_dim: int
    step: Callable[[Array, Array], Array]
    state_box: Box
    control_box: Box
    equilibrium_state: Array
    equilibrium_control: Array
    # optional (A, B) = d step / d(x, u); the OCP solver falls back to
    # finite differences when absent
    step_jacobians: Optional[Callable[[Array, Array], Tuple[Array, Array]]] = None
    # optional vectorized variant over a whole trajectory: (X, U) with rows as
    # nodes -> stacked (N, nx, nx), (N, nx, nu); a fast path for the adjoint
    step_jacobians_traj: Optional[Callable[[Array, Array], Tuple[Array, Array]]] = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "equilibrium_state", _freeze(self.equilibrium_state))
        object.__setattr__(self, "equilibrium_control", _freeze(self.equilibrium_control))
        if self.state_box.dim != self.state_dim or self.control_box.dim != self.control_dim:
            raise ValueError("box dimensions do not match state/control dimensions")
        if not self.state_box.contains_strict(self.equilibrium_state):
            raise ValueError("equilibrium state must lie strictly inside the state box")
        if not self.control_box.contains_strict(self.equilibrium_control):
            raise ValueError("equilibrium control must lie strictly inside the control box")
        res = float(
            np.max(np.abs(self.step(self.equilibrium_state, self.equilibrium_control) - self.equilibrium_state))
        )
        if res > _EQUILIBRIUM_RESIDUAL_MAX:
            raise ValueError(
                f"equilibrium is not a fixed point of step: residual {res:.3e} "
                f"exceeds {_EQUILIBRIUM_RESIDUAL_MAX:.0e}"
            )

    def jacobians(self, x: Array, u: Array) -> Tuple[Array, Array]:
        """(A, B) at (x, u); central finite differences when no callable is set."""
        if self.step_jacobians is not None:
            return self.step_jacobians(x, u)
        return fd_step_jacobians(self.step, x, u)


@dataclass(frozen=True)
class EulerSpec:
    """Continuous-time right-hand side plus sampling time for explicit Euler."""

    continuous_rhs: Callable[[Array, Array], Array]
    dt: float
    # optional analytic (d rhs/dx, d rhs/du); finite differences otherwise
    rhs_jacobians: Optional[Callable[[Array, Array], Tuple[Array, Array]]] = None
    # optional vectorized analogue over stacked rows of states/controls
    rhs_jacobians_traj: Optional[Callable[[Array, Array], Tuple[Array, Array]]] = None

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError(f"sampling time must be positive, got {self.dt}")


def fd_step_jacobians(step: Callable[[Array, Array], Array], x: Array, u: Array,
                      h: float = _FD_STEP) -> Tuple[Array, Array]:
    """Central-difference Jacobians of a one-step map."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    nx, nu = x.size, u.size
    A = np.empty((nx, nx))
    B = np.empty((nx, nu))
    for j in range(nx):
        e = np.zeros(nx)
        e[j] = h
        A[:, j] = (step(x + e, u) - step(x - e, u)) / (2.0 * h)
    for j in range(nu):
        e = np.zeros(nu)
        e[j] = h
        B[:, j] = (step(x, u + e) - step(x, u - e)) / (2.0 * h)
    return A, B


def euler_discretize(spec: EulerSpec, state_box: Box, control_box: Box,
                     equilibrium_state: Array | None = None,
                     equilibrium_control: Array | None = None,
                     name: str = "") -> SystemModel:
    """Build the discrete model x+ = x + dt * rhs(x, u).

    The equilibrium pair defaults to the origin.  Construction fails when the
    equilibrium residual of the discretized map exceeds 1e-9.
    """
    nx, nu = state_box.dim, control_box.dim
    xbar = np.zeros(nx) if equilibrium_state is None else np.asarray(equilibrium_state, dtype=float)
    ubar = np.zeros(nu) if equilibrium_control is None else np.asarray(equilibrium_control, dtype=float)
    rhs, dt = spec.continuous_rhs, float(spec.dt)

    def step(x: Array, u: Array) -> Array:
        return np.asarray(x, dtype=float) + dt * np.asarray(rhs(x, u), dtype=float)

    step_jac = None
    if spec.rhs_jacobians is not None:
        rhs_jac = spec.rhs_jacobians
        eye = np.eye(nx)

        def step_jac(x: Array, u: Array) -> Tuple[Array, Array]:
            Jx, Ju = rhs_jac(x, u)
            return eye + dt * Jx, dt * Ju

    step_jac_traj = None
    if spec.rhs_jacobians_traj is not None:
        rhs_jac_traj = spec.rhs_jacobians_traj
        eye = np.eye(nx)

        def step_jac_traj(X: Array, U: Array) -> Tuple[Array, Array]:
            Jx, Ju = rhs_jac_traj(X, U)
            return eye[None, :, :] + dt * Jx, dt * Ju

    return SystemModel(
        state_dim=nx,
        control_dim=nu,
        step=step,
        state_box=state_box,
        control_box=control_box,
        equilibrium_state=xbar,
        equilibrium_control=ubar,
        step_jacobians=step_jac,
        step_jacobians_traj=step_jac_traj,
        name=name,
    )


def make_mass_spring_damper(dt: float = 0.7, m: float = 1.0, d: float = 0.2, s: float = 1.0,
                            state_bound: float = 10.0, control_bound: float = 10.0) -> SystemModel:
    """Two-state mass-spring-damper, Euler discretized (default dt = 0.7)."""

    def rhs(x: Array, u: Array) -> Array:
        return np.array([x[1], (u[0] - d * x[1] - s * x[0]) / m])

    Jx = np.array([[0.0, 1.0], [-s / m, -d / m]])
    Ju = np.array([[0.0], [1.0 / m]])

    def rhs_jacobians(x: Array, u: Array) -> Tuple[Array, Array]:
        return Jx, Ju

    def rhs_jacobians_traj(X: Array, U: Array) -> Tuple[Array, Array]:
        n = X.shape[0]
        return np.broadcast_to(Jx, (n, 2, 2)), np.broadcast_to(Ju, (n, 2, 1))

    spec = EulerSpec(continuous_rhs=rhs, dt=dt, rhs_jacobians=rhs_jacobians,
                     rhs_jacobians_traj=rhs_jacobians_traj)
    return euler_discretize(
        spec,
        state_box=Box(np.full(2, -state_bound), np.full(2, state_bound)),
        control_box=Box(np.full(1, -control_bound), np.full(1, control_bound)),
        name="msd",
    )


def make_primbs_system(dt: float = 0.1, state_bound: float = 50.0,
                       control_bound: float = 100.0) -> SystemModel:
    """Two-state nonlinear benchmark, Euler discretized with dt = 0.1.

    The boxes are deliberately generous so that the sweep grid [-5, 5]^2 stays
    interior and the terminal constraint remains reachable within the short
    horizon; tighter boxes make distant initial states infeasible.
    """

    def rhs(x: Array, u: Array) -> Array:
        x1, x2 = x[0], x[1]
        dx2 = (-x1 * (np.pi / 2.0 + np.arctan(5.0 * x1))
               - 5.0 * x1 * x1 / (2.0 * (1.0 + 25.0 * x1 * x1))
               + 4.0 * x2 + 3.0 * u[0])
        return np.array([x2, dx2])

    def rhs_jacobians(x: Array, u: Array) -> Tuple[Array, Array]:
        x1 = x[0]
        q = 1.0 + 25.0 * x1 * x1
        d21 = -(np.pi / 2.0 + np.arctan(5.0 * x1)) - 5.0 * x1 / q - 5.0 * x1 / (q * q)
        return np.array([[0.0, 1.0], [d21, 4.0]]), np.array([[0.0], [3.0]])

    Ju = np.array([[0.0], [3.0]])

    def rhs_jacobians_traj(X: Array, U: Array) -> Tuple[Array, Array]:
        n = X.shape[0]
        x1 = X[:, 0]
        q = 1.0 + 25.0 * x1 * x1
        Jx = np.zeros((n, 2, 2))
        Jx[:, 0, 1] = 1.0
        Jx[:, 1, 0] = -(np.pi / 2.0 + np.arctan(5.0 * x1)) - 5.0 * x1 / q - 5.0 * x1 / (q * q)
        Jx[:, 1, 1] = 4.0
        return Jx, np.broadcast_to(Ju, (n, 2, 1))

    spec = EulerSpec(continuous_rhs=rhs, dt=dt, rhs_jacobians=rhs_jacobians,
                     rhs_jacobians_traj=rhs_jacobians_traj)
    return euler_discretize(
        spec,
        state_box=Box(np.full(2, -state_bound), np.full(2, state_bound)),
        control_box=Box(np.full(1, -control_bound), np.full(1, control_bound)),
        name="primbs",
    )


BENCHMARKS = {
    "msd": make_mass_spring_damper,
    "primbs": make_primbs_system,
}


def make_benchmark(name: str) -> SystemModel:
    try:
        return BENCHMARKS[name]()
    except KeyError:
        raise ValueError(f"unknown benchmark {name!r}; expected one of {sorted(BENCHMARKS)}") from None
