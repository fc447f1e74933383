"""Exception hierarchy shared across the package."""


class SecantLabError(Exception):
    """Base class for all package errors."""


class ConfigError(SecantLabError, ValueError):
    """Invalid or inconsistent configuration."""


class TimeRangeError(SecantLabError, ValueError):
    """A time argument falls outside the admissible interval."""


class ShapeError(SecantLabError, ValueError):
    pass


class SingularityError(SecantLabError, ArithmeticError):
    """A closed-form quantity is undefined at the requested time."""


class NumericalError(SecantLabError, ArithmeticError):
    """Non-finite values appeared during a computation."""


class DivergenceError(NumericalError):
    pass


class IntegrityError(SecantLabError):
    """A checkpoint file is truncated, corrupt or of the wrong version."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CapabilityError(SecantLabError):
    """The model was not trained for the requested operation."""
