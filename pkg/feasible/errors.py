"""
feasible/errors.py

Exception hierarchy for the solver stack.

Every solver failure derives from FpiError so the CLI can map it to exit
status 1; ConfigError maps to exit status 2.
"""

from typing import List, Optional


class FpiError(Exception):
    """Base class for all solver, oracle and configuration failures."""


class ConvergenceError(FpiError, RuntimeError):
    """A fixed-point or outer iteration exhausted its budget."""

    def __init__(self, message: str, history: Optional[List[float]] = None,
                 report=None):
        super().__init__(message)
        self.history = list(history or [])
        self.report  = report


class InconsistentInputError(FpiError, ValueError):
    """Artifacts handed to a solver contradict each other (solver bug or bad mask)."""


class NonFiniteModelError(FpiError, ValueError):
    """Dynamics, reward or constraint produced NaN/inf while building an MDP."""


class BudgetExceededError(FpiError, ValueError):
    """Exhaustive enumeration refused because the policy space is too large."""


class ConfigError(FpiError, ValueError):
    """Run configuration could not be parsed or validated."""

    def __init__(self, message: str, field: Optional[str] = None,
                 line: Optional[int] = None):
        super().__init__(message)
        self.field = field
        self.line  = line
