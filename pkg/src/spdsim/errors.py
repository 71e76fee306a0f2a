"""Exception types shared across the package."""


class SpdError(Exception):
    """Base class for all package errors."""


class ShapeError(SpdError):
    """Operand dimensions are incompatible."""


class ConfigError(SpdError):
    """Invalid configuration or parameter value."""


class DataError(SpdError):
    """Invalid or insufficient input data."""


class ContractError(SpdError):
    """An operation was called outside its contract (wrong mode, non-scalar loss, ...)."""


class CapacityError(SpdError):
    """Exhaustive search requested beyond the enumeration budget."""


class DivergenceError(SpdError):
    """Training or distillation produced a non-finite loss."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NumericError(SpdError):
    """An operation produced NaN or Inf."""
