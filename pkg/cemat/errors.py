"""Exceptions raised by cemat.

Every exception carries the process exit code the CLI reports for it.
"""


class CematError(Exception):
    exit_code = 1


class UsageError(CematError):
    exit_code = 1


class DataError(CematError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class NumericError(CematError, ArithmeticError):
    """A computation produced non-finite values."""

    exit_code = 3


class ShapeError(CematError, ValueError):
    exit_code = 3


class AutogradError(CematError, RuntimeError):
    exit_code = 3
