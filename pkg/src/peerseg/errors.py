"""Shared exception types.

The CLI maps these onto process exit codes: usage/configuration errors -> 1,
data/format errors -> 2, numeric errors -> 3.
"""


class ConfigError(ValueError):
    """A configuration value (or combination) is invalid."""


class FormatError(ValueError):
    """A binary or text input does not conform to its file format.

    ``offset`` is the byte offset at which the problem was detected, when
    meaningful.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ArithmeticError):
    """A numeric invariant was violated (non-finite values, failed factorization)."""
