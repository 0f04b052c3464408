"""Optimal feedback for partially observed mean-field LQ problems."""
from .model import (
    AssumptionReport,
    CoefficientPath,
    MFLQProblem,
    TimeGrid,
    al_problem,
    dump_scenario,
    load_scenario,
    special_case_gate,
    validate,
)
from .riccati import BlowUpError, RiccatiBundle, integrate_matrix_ode
from .synthesis import FeedbackLaw, ReducedCost, analytic_cost, reduce_cost, synthesize

__all__ = [
    "AssumptionReport",
    "BlowUpError",
    "CoefficientPath",
    "FeedbackLaw",
    "MFLQProblem",
    "ReducedCost",
    "RiccatiBundle",
    "TimeGrid",
    "al_problem",
    "analytic_cost",
    "dump_scenario",
    "integrate_matrix_ode",
    "load_scenario",
    "reduce_cost",
    "special_case_gate",
    "synthesize",
    "validate",
]
