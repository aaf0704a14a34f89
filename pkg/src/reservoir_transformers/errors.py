"""Exception types shared across the package."""


class ReservoirError(Exception):
    """Base class for all package errors."""


class ShapeError(ReservoirError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ReservoirError, ValueError):
    """A configuration value is invalid. The message names the field."""


class ContractError(ReservoirError, ValueError):
    """An operation was called outside its precondition."""


class NumericError(ReservoirError, ArithmeticError):
    """A loss or gradient became NaN or infinite."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
