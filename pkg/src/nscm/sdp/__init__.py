"""Interior-point solver for block-diagonal LMI programs."""

from .solver import FeasibilityReport, SolveReport, Tolerances, check_feasibility, solve

__all__ = ["FeasibilityReport", "SolveReport", "Tolerances", "check_feasibility", "solve"]
