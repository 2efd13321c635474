"""
Error types raised by the TraDy engine.
"""
from typing import Optional


class TradyError(Exception):
    """Base class for every engine error."""


class ShapeError(TradyError, ValueError):
    """A tensor dimension does not match what an operation expects."""

    def __init__(self, what: str, dimension: str, expected, actual):
        self.what = what
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: {dimension} expected {expected}, got {actual}")


class MaskError(TradyError, ValueError):
    """A selection mask does not fit the network or the activation cache."""


class BudgetViolation(TradyError):
    """A budgeted selection used more memory slots than allowed."""

    def __init__(self, slots: int, budget: int, context: str = ""):
        self.slots = slots
        self.budget = budget
        where = f" ({context})" if context else ""
        super().__init__(f"selection uses {slots} slots, budget is {budget}{where}")


class CounterMismatch(TradyError):
    """Instrumented MACs differ from the analytic cost model."""

    def __init__(self, instrumented: int, analytic: int):
        self.instrumented = instrumented
        self.analytic = analytic
        super().__init__(f"instrumented weight-gradient MACs {instrumented} != analytic {analytic}")


class InvariantError(TradyError):
    """Two computations that must agree did not."""


class UncomputedGradientError(TradyError):
    """A frozen (not computed) gradient slice was asked for a score."""


class EstimationError(TradyError):
    """Heavy-tail index estimation cannot run on the given samples."""

    def __init__(self, message: str, epoch: Optional[int] = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)


class StatisticsError(TradyError, ValueError):
    """A statistic is undefined for the given samples."""


class IdxFormatError(TradyError):
    """An IDX file is malformed."""

    def __init__(self, path, message: str, expected=None, actual=None):
        self.path = str(path)
        self.expected = expected
        self.actual = actual
        detail = ""
        if expected is not None or actual is not None:
            detail = f" (expected {expected}, got {actual})"
        super().__init__(f"{path}: {message}{detail}")


class CheckpointError(TradyError):
    """Checkpoint manifest and blob are inconsistent."""


class ConfigError(TradyError, ValueError):
    """Invalid experiment configuration."""


class ReportError(TradyError):
    """A result file could not be written or parsed."""
