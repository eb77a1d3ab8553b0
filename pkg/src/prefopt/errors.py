"""Exception types shared across the package.

The CLI maps these onto its exit codes, so every failure a user can trigger
should surface as one of them.
"""


class PrefOptError(Exception):
    """Base class for all package errors."""


class ShapeError(PrefOptError, ValueError):
    pass


class ContractError(PrefOptError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(PrefOptError, ValueError):
    pass


class DataError(PrefOptError, ValueError):
    """A dataset record is malformed or violates an invariant.

    ``record_id`` names the offending record and ``line`` the 1-based file
    line, when known.
    """

    def __init__(self, message, record_id=None, line=None):
        super().__init__(message)
        self.record_id = record_id
        self.line = line


class NumericalError(PrefOptError, ArithmeticError):
    """Non-finite value produced where a finite one is required."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointError(PrefOptError, IOError):
    pass


class LengthError(ContractError):
    """Sequence longer than the model's positional budget."""


class ParseError(DataError):
    """A dataset or trace file line could not be parsed."""
