"""Terminal-constrained MPC with TD-adapted stage-cost shaping."""

from .analysis import SuboptimalityReport, VInfEstimate, build_report, estimate_v_infinity
from .closed_loop import ClosedLoopTrace, LoopConfig, decay_check, run_closed_loop, trace_to_csv
from .dynamics import (Box, EulerSpec, SystemModel, euler_discretize, make_benchmark,
                       make_mass_spring_damper, make_primbs_system)
from .ingredients import (StageCost, TerminalIngredients, decay_ratio,
                          lq_terminal_ingredients, make_quadratic_stage_cost)
from .ocp import (NumericalDomainError, OcpProblem, OcpSolution, SolverSettings,
                  evaluate_candidate, solve, warm_start_shift)
from .shaping import (CoefficientVector, StabilityConstraintData, allocation_update,
                      build_constraint_data, constant_coefficients, critic_update,
                      offline_td_calibrate, td_update_closed_form, w_membership)
from .sweep import (CellResult, SweepResult, SweepSpec, default_sweep_spec, emit_results,
                    parse_cells_csv, run_sweep)

__version__ = "0.1.0"
