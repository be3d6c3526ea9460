"""Independent reference computations used to pin solver outputs.

Everything here avoids the package's gradient/adjoint/penalty machinery on
purpose: values come from enumeration, refinement, or direct KKT algebra.
"""

import itertools

import numpy as np


def rollout_value(model, cost, terminal, coefficients, x0, U, feas_tol=1e-9):
    """Plain forward rollout of one control sequence.

    Returns (value, final_state); the value is +inf when the rollout violates
    the state box or the terminal sublevel constraint.
    """
    x = np.asarray(x0, dtype=float)
    total = 0.0
    feasible = True
    for i in range(U.shape[0]):
        u = U[i]
        total += coefficients[i] * cost.evaluate(x, u)
        x = model.step(x, u)
        if model.state_box.margin(x) < -feas_tol:
            feasible = False
    total += terminal.terminal_cost(x)
    if terminal.margin(x) < -feas_tol:
        feasible = False
    return (total if feasible else np.inf), x


def grid_search_ocp(model, cost, terminal, coefficients, x0, horizon,
                    coarse=None, rounds=14, shrink=0.2, top_k=3):
    """Exhaustive control-grid search with local refinement.

    One control dimension starts at 1e-3 spacing over the box; higher
    dimensional problems start coarser and rely on the refinement rounds,
    keeping the top cells each round to protect against early pruning.
    Returns (value, U, terminal_state).
    """
    nu = model.control_dim
    dim = horizon * nu
    lo = np.tile(model.control_box.lower, horizon).astype(float)
    hi = np.tile(model.control_box.upper, horizon).astype(float)
    if coarse is None:
        coarse = max(3, int(np.ceil((hi[0] - lo[0]) / 1e-3)) + 1) if dim == 1 else (41 if dim == 2 else 17)

    def evaluate(points):
        vals = np.empty(points.shape[0])
        for idx in range(points.shape[0]):
            vals[idx], _ = rollout_value(model, cost, terminal, coefficients, x0,
                                         points[idx].reshape(horizon, nu))
        return vals

    def grid_around(center, half_width, n):
        axes = [np.linspace(max(lo[d], center[d] - half_width[d]),
                            min(hi[d], center[d] + half_width[d]), n)
                for d in range(dim)]
        return np.array(list(itertools.product(*axes)))

    centers = [(lo + hi) / 2.0]
    widths = (hi - lo) / 2.0
    n = coarse
    best_val, best_u = np.inf, None
    for _ in range(rounds):
        candidates = np.vstack([grid_around(c, widths, n) for c in centers])
        vals = evaluate(candidates)
        order = np.argsort(vals)
        if vals[order[0]] < best_val:
            best_val = float(vals[order[0]])
            best_u = candidates[order[0]]
        centers = [candidates[i] for i in order[:top_k]]
        widths = widths * shrink
        n = 9
        if np.max(widths) < 1e-9:
            break
    U = best_u.reshape(horizon, nu)
    val, x_final = rollout_value(model, cost, terminal, coefficients, x0, U)
    return val, U, x_final


def td_objective_grid_argmin(stage, successor, coeff, c_max=5.0, resolution=1e-4):
    """Brute-force argmin over C of the squared one-step TD residual."""
    grid = np.arange(resolution, c_max + resolution / 2, resolution)
    resid = stage - grid * stage + coeff * successor
    return float(grid[np.argmin(resid * resid)])


def offline_td_fixed_point(ratio):
    """Algebraic fixed point of the scalar offline iteration for one sample."""
    if ratio >= 1.0:
        raise ValueError("no finite fixed point for ratio >= 1")
    return 1.0 / (1.0 - ratio)


def critic_qp_bruteforce(stage, beta, a, b, lb):
    """Global minimum of sum (beta - C l)^2 s.t. a.C + b <= 0, C >= lb.

    Enumerates every active set (each bound, plus the half-space) and solves
    the corresponding KKT system directly; feasible candidates compete on the
    objective.  Intended for small N only.
    """
    n = stage.size
    best_val, best_c = np.inf, None

    def objective(C):
        r = beta - C * stage
        return float(r @ r)

    for bound_mask in itertools.product([False, True], repeat=n):
        bound_mask = np.array(bound_mask)
        for halfspace_active in (False, True):
            free = ~bound_mask
            C = np.full(n, lb, dtype=float)
            if not halfspace_active:
                if np.any(free):
                    with np.errstate(divide="ignore", invalid="ignore"):
                        C[free] = np.where(stage[free] > 0, beta[free] / np.maximum(stage[free], 1e-300), lb)
            else:
                af, lf, bf = a[free], stage[free], beta[free]
                denom = float(np.sum(np.where(lf > 0, (af / np.maximum(lf, 1e-300)) ** 2, 0.0)))
                rhs = -b - float(a[bound_mask] @ C[bound_mask])
                if denom <= 0:
                    continue
                lam = 2.0 * (float(np.sum(np.where(lf > 0, af * bf / np.maximum(lf, 1e-300), 0.0))) - rhs) / denom
                with np.errstate(divide="ignore", invalid="ignore"):
                    C[free] = np.where(
                        lf > 0,
                        bf / np.maximum(lf, 1e-300) - lam * af / np.maximum(2.0 * lf * lf, 1e-300),
                        lb,
                    )
            if not np.all(np.isfinite(C)):
                continue
            if np.any(C < lb - 1e-9):
                continue
            if float(a @ C + b) > 1e-9:
                continue
            val = objective(C)
            if val < best_val - 1e-15:
                best_val, best_c = val, C.copy()
    return best_c, best_val
