"""Exception types shared across the package.

The CLI maps `DataError` to exit code 3 and `NumericalError` to exit code 4.
"""


class RiaftError(Exception):
    """Base class for all package errors."""


class DataError(RiaftError, ValueError):
    """Input data failed validation (bad row, missing column, ...)."""


class NumericalError(RiaftError, ArithmeticError):
    """A numerical routine failed to converge or hit a degenerate case."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class CheckpointError(RiaftError):
    """Checkpoint file is corrupt or was written by an incompatible version."""
