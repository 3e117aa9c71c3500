"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage/config problems -> 1,
data/format problems -> 2, numeric failures -> 3.
"""


class AutopaletteError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(AutopaletteError):
    """Array dimensions do not match what an operation requires."""


class ContractError(AutopaletteError):
    """An API was called in a way its contract forbids (e.g. backward twice)."""


class ConfigError(AutopaletteError):
    """Invalid or inconsistent configuration values."""


class ParameterError(AutopaletteError):
    """A parameter is outside its legal range for the given input."""


class FormatError(AutopaletteError):
    """Malformed file content. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(AutopaletteError):
    """A numeric computation produced non-finite or unusable values."""


class TrainingError(AutopaletteError):
    """Optimization failed (divergence, non-finite gradients)."""
