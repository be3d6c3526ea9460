import numpy as np
import pytest

from shapedmpc.analysis import (SuboptimalityReport, VInfEstimate, build_report,
                                estimate_v_infinity, report_row)
from shapedmpc.closed_loop import LoopConfig, run_closed_loop


@pytest.fixture(scope="module")
def msd_pair(msd_stack):
    model, cost, ingredients = msd_stack
    x0 = np.array([1.0, 0.0])
    shaped = run_closed_loop(model, cost, ingredients,
                             LoopConfig(controller="shaped", horizon=10,
                                        initial_coefficients=5.0, update_rule="allocation"), x0)
    baseline = run_closed_loop(model, cost, ingredients,
                               LoopConfig(controller="baseline", horizon=10,
                                          update_rule="frozen"), x0)
    v_inf = estimate_v_infinity(model, cost, ingredients, x0)
    return shaped, baseline, v_inf


def test_surrogate_zero_at_equilibrium(msd_stack):
    model, cost, ingredients = msd_stack
    est = estimate_v_infinity(model, cost, ingredients, np.zeros(2))
    assert est.value == 0.0
    assert est.gap == 0.0
    assert est.converged


def test_surrogate_matches_riccati_in_unconstrained_region(msd_stack):
    # with the exact LQ terminal cost and inactive constraints, the true
    # optimal value is x' P x
    model, cost, ingredients = msd_stack
    rng = np.random.default_rng(9)
    for _ in range(3):
        x0 = rng.uniform(-0.15, 0.15, 2)
        est = estimate_v_infinity(model, cost, ingredients, x0)
        ref = float(x0 @ ingredients.quadratic_matrix @ x0)
        assert abs(est.value - ref) <= 0.01 * max(ref, 1e-12)


def test_surrogate_monotone_in_horizon(msd_stack):
    model, cost, ingredients = msd_stack
    from shapedmpc.analysis import _horizon_value
    from shapedmpc.ocp import SolverSettings
    x0 = np.array([0.9, -0.4])
    costs = [_horizon_value(model, cost, ingredients, x0, H, SolverSettings())[0]
             for H in (15, 30, 60)]
    assert costs[1] <= costs[0] + 1e-6
    assert costs[2] <= costs[1] + 1e-6


def test_report_fields_msd(msd_pair):
    shaped, baseline, v_inf = msd_pair
    rep = build_report(shaped, baseline, v_inf)
    tol = rep.tolerance
    assert rep.delta0 == pytest.approx(shaped.initial_value - v_inf.value)
    assert rep.gamma0 == pytest.approx(baseline.initial_value - v_inf.value)
    assert rep.delta_l_sum == pytest.approx(
        float((shaped.coefficients[:, 0] - 1.0) @ shaped.stage_costs), abs=1e-10)
    assert rep.bound5_slack >= -tol
    assert rep.bound6_slack >= -tol
    assert rep.bound20_slack >= -tol
    assert rep.bound19_delta_VN == pytest.approx(-rep.gamma0 + rep.delta0 - rep.delta_l_sum)
    assert rep.bound6_slack == pytest.approx(rep.delta0 - rep.delta_l_sum)


def test_report_equilibrium_all_zero(msd_stack):
    model, cost, ingredients = msd_stack
    x0 = np.zeros(2)
    shaped = run_closed_loop(model, cost, ingredients,
                             LoopConfig(controller="shaped", horizon=10,
                                        initial_coefficients=5.0, update_rule="allocation"), x0)
    baseline = run_closed_loop(model, cost, ingredients,
                               LoopConfig(controller="baseline", horizon=10,
                                          update_rule="frozen"), x0)
    rep = build_report(shaped, baseline, estimate_v_infinity(model, cost, ingredients, x0))
    for field in ("v_inf_surrogate", "delta0", "gamma0", "delta_l_sum",
                  "shaped_cost", "baseline_cost", "bound5_slack", "bound6_slack",
                  "bound19_delta_VN", "bound20_slack"):
        assert getattr(rep, field) == 0.0


def test_frozen_ones_trace_has_zero_delta_l(msd_stack):
    model, cost, ingredients = msd_stack
    x0 = np.array([0.6, 0.2])
    frozen = run_closed_loop(model, cost, ingredients,
                             LoopConfig(controller="shaped", horizon=10,
                                        initial_coefficients=1.0, update_rule="frozen"), x0)
    baseline = run_closed_loop(model, cost, ingredients,
                               LoopConfig(controller="baseline", horizon=10,
                                          update_rule="frozen"), x0)
    v_inf = estimate_v_infinity(model, cost, ingredients, x0)
    rep = build_report(frozen, baseline, v_inf)
    assert rep.delta_l_sum == 0.0
    assert rep.shaped_cost == rep.baseline_cost
    assert rep.bound5_slack == pytest.approx(rep.delta0 + (v_inf.value - rep.shaped_cost))


def test_mismatched_initial_states_rejected(msd_stack):
    model, cost, ingredients = msd_stack
    a = run_closed_loop(model, cost, ingredients,
                        LoopConfig(controller="shaped", horizon=10,
                                   initial_coefficients=2.0, update_rule="allocation",
                                   max_steps=5), np.array([0.5, 0.0]))
    b = run_closed_loop(model, cost, ingredients,
                        LoopConfig(controller="baseline", horizon=10, update_rule="frozen",
                                   max_steps=5), np.array([0.4, 0.0]))
    with pytest.raises(ValueError, match="different initial states"):
        build_report(a, b, VInfEstimate(1.0, 0.0, 60, True))


def test_negative_delta0_flagged(msd_pair):
    shaped, baseline, _ = msd_pair
    inflated = VInfEstimate(value=shaped.initial_value + 10.0, gap=0.0, horizon=60, converged=True)
    rep = build_report(shaped, baseline, inflated)
    assert rep.delta0 < 0.0
    assert "negative_delta0" in rep.flags


def test_report_row_flat_record(msd_pair):
    shaped, baseline, v_inf = msd_pair
    row = report_row(build_report(shaped, baseline, v_inf))
    assert row["x0_0"] == 1.0 and row["x0_1"] == 0.0
    for key in ("v_inf", "delta0", "gamma0", "delta_l_sum", "shaped_cost",
                "baseline_cost", "bound5_slack", "bound6_slack", "delta_VN",
                "bound20_slack", "flags"):
        assert key in row


def test_tolerance_follows_surrogate_gap():
    est = VInfEstimate(value=3.0, gap=2.5e-4, horizon=120, converged=True)
    assert est.tolerance == pytest.approx(2.5e-4 + 1e-8)
