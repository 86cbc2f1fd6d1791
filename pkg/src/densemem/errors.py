"""Exception hierarchy shared across the package."""


class DenseMemError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DenseMemError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(DenseMemError, ValueError):
    """A scalar or structural parameter violates its precondition."""


class NumericError(DenseMemError, ArithmeticError):
    """A computation produced or received a non-finite value."""


class ContractError(DenseMemError, RuntimeError):
    """An API was used outside its contract (e.g. backward on a non-scalar)."""


class FormatError(DenseMemError, ValueError):
    """A persisted file does not match the expected binary or text format."""
