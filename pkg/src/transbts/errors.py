"""Exception hierarchy shared across the package."""


class TransBTSError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TransBTSError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(TransBTSError, ValueError):
    """An operation was evaluated outside its mathematical domain."""


class ContractError(TransBTSError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(TransBTSError, ValueError):
    """A model or run configuration is invalid.

    ``field`` names the offending configuration key when one is known.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NumericalError(TransBTSError, ArithmeticError):
    """A loss or gradient became non-finite."""


class DataError(TransBTSError):
    """Input data is missing, malformed or inconsistent."""
