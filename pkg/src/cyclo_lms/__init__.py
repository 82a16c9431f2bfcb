"""Performance analysis of the LMS filter with cyclostationary signals.

The package evaluates the transient and steady-state MSE of an LMS filter
whose input and desired signal are jointly wide-sense cyclostationary,
checks mean and mean-square stability, and verifies the predictions with a
seeded Monte Carlo simulator.
"""

from cyclo_lms.cyclolinalg import PeriodicSequence
from cyclo_lms.lms_theory import (
    StabilityReport,
    SteadyState,
    TheoryTrace,
    run_theory,
    stability_report,
    steady_state,
)
from cyclo_lms.lms_sim import EmpiricalCurve, monte_carlo_mse
from cyclo_lms.moment_matrices import MomentMatrixSet, build_moment_matrices
from cyclo_lms.scenarios import Scenario, example1, example2, from_config, nbplc_lite

__version__ = "0.1.0"

__all__ = [
    "EmpiricalCurve",
    "MomentMatrixSet",
    "PeriodicSequence",
    "Scenario",
    "StabilityReport",
    "SteadyState",
    "TheoryTrace",
    "build_moment_matrices",
    "example1",
    "example2",
    "from_config",
    "monte_carlo_mse",
    "nbplc_lite",
    "run_theory",
    "stability_report",
    "steady_state",
]
