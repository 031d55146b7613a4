"""Exceptions raised by the solvers and the run harness."""

from typing import Any, Optional


class LabError(Exception):
    """Base class for every error this package raises on purpose."""


class ConfigurationError(LabError, ValueError):
    pass


class DegenerateSampleError(LabError, ValueError):
    """Bandwidth selection needs at least two distinct positions."""


class NonPositiveFunctionalError(LabError, ArithmeticError):
    """A density-functional estimate came out <= 0 or non-finite."""


class GridMismatchError(LabError, ValueError):
    pass


class BlowUpError(LabError, ArithmeticError):
    """``last_good`` is the state before the failing step; solvers attach what
    they recorded so far as ``partial`` and the run harness its report as ``report``."""

    def __init__(self, message: str, time: float, last_good: Optional[Any] = None):
        super().__init__(f"{message} (t={time:.6g})")
        self.time = time
        self.last_good = last_good
        self.partial: Optional[Any] = None
        self.report: Optional[Any] = None


class ExportError(LabError, OSError):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path


class DomainError(LabError, ValueError):
    """Argument outside the domain of a mathematical function."""
