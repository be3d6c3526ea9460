import numpy as np
import pytest

from shapedmpc.dynamics import Box, SystemModel, make_mass_spring_damper, make_primbs_system
from shapedmpc.ingredients import lq_terminal_ingredients, make_quadratic_stage_cost


@pytest.fixture(scope="session")
def msd_stack():
    model = make_mass_spring_damper()
    cost = make_quadratic_stage_cost([1.0, 1.0], [1.0])
    ingredients = lq_terminal_ingredients(model, cost, level=0.1)
    return model, cost, ingredients


@pytest.fixture(scope="session")
def primbs_stack():
    model = make_primbs_system()
    cost = make_quadratic_stage_cost([0.0, 1.0], [1.0])
    ingredients = lq_terminal_ingredients(model, cost, level=0.1)
    return model, cost, ingredients


@pytest.fixture(scope="session")
def scalar_toy():
    """x+ = x + u with l = x^2 + u^2; Riccati value is the golden ratio."""
    model = SystemModel(
        state_dim=1, control_dim=1,
        step=lambda x, u: np.asarray(x, dtype=float) + np.asarray(u, dtype=float),
        state_box=Box([-100.0], [100.0]), control_box=Box([-100.0], [100.0]),
        equilibrium_state=[0.0], equilibrium_control=[0.0],
    )
    cost = make_quadratic_stage_cost([1.0], [1.0])
    ingredients = lq_terminal_ingredients(model, cost, level=1e6)
    return model, cost, ingredients
