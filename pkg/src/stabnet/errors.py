"""Exception types shared across the package.

Each maps to one CLI exit code: parameter/config problems exit 2, I/O and
parse failures exit 3, numeric aborts exit 4.
"""


class StabnetError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DimensionError(StabnetError, ValueError):
    exit_code = 2


class ParameterError(StabnetError, ValueError):
    exit_code = 2


class ConfigError(StabnetError, ValueError):
    exit_code = 2


class BatchError(StabnetError, ValueError):
    """Replica groups of unequal size or inconsistent labels."""

    exit_code = 2


class ParseError(StabnetError, ValueError):
    """A data, manifest or checkpoint file could not be decoded."""

    exit_code = 3


class NumericError(StabnetError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""

    exit_code = 4
