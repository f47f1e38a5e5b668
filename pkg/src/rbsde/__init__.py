"""Doubly reflected BSDEs solved by penalization, with exact lattice oracles."""
from __future__ import annotations

__version__ = "0.1.0"

from .core import (
    BarrierPair,
    Driver,
    MokobodzkiWitness,
    ProblemSpec,
    SolutionQuadruple,
    TerminalCondition,
    TimeGrid,
    build_lattice,
    validate_problem,
)
from .lattice import (
    solve_bsde,
    solve_hybrid,
    solve_penalized,
    solve_reflected_oracle,
)
from .runner import PenalizationSchedule, double_limit_study, monotone_limit_check, run_schedule

__all__ = [
    "BarrierPair",
    "Driver",
    "MokobodzkiWitness",
    "PenalizationSchedule",
    "ProblemSpec",
    "SolutionQuadruple",
    "TerminalCondition",
    "TimeGrid",
    "build_lattice",
    "double_limit_study",
    "monotone_limit_check",
    "run_schedule",
    "solve_bsde",
    "solve_hybrid",
    "solve_penalized",
    "solve_reflected_oracle",
    "validate_problem",
]
