"""Exception types raised across the package."""

from __future__ import annotations


class BcdMheError(Exception):
    """Base class for all package errors."""


class ConfigError(BcdMheError, ValueError):
    """Invalid or inconsistent configuration."""


class DegenerateGeometry(BcdMheError, ValueError):
    """Robot position coincides with a landmark, so the bearing is undefined."""


class NumericalFailure(BcdMheError, ArithmeticError):
    """A linear system could not be solved (singular normal or innovation matrix)."""


class SolverFailure(NumericalFailure):
    """Nonlinear least-squares solve failed."""
