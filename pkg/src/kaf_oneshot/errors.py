"""Exception types shared across the package."""


class KafOneshotError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(KafOneshotError, ValueError):
    """An array has the wrong rank or a mismatched extent on a named axis."""


class ParameterError(KafOneshotError, ValueError):
    """An argument is outside its documented domain."""


class NumericError(KafOneshotError, ArithmeticError):
    """A computation produced or received non-finite values, or a solver failed."""


class FormatError(KafOneshotError, ValueError):
    """A data file violates its on-disk format contract."""


class SamplingError(KafOneshotError, ValueError):
    """A dataset cannot support the requested pair or episode sampling."""


class MetricError(KafOneshotError, ValueError):
    """A metric's preconditions (class counts, set sizes) are not met."""


class TrainingError(KafOneshotError, RuntimeError):
    """Training diverged; carries the global step index where it happened."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class StateError(KafOneshotError, RuntimeError):
    """An operation ran against an object in the wrong lifecycle state."""
