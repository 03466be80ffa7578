"""Exception types shared across the package.

The CLI maps each class onto a stable exit code.
"""


class TreatSurvError(Exception):
    """Base class for package errors."""


class ConfigError(TreatSurvError, ValueError):
    """Invalid configuration or usage."""


class ShapeError(TreatSurvError, ValueError):
    """Tensor, volume or parameter shapes do not agree."""


class ValidationError(TreatSurvError, ValueError):
    """A value lies outside its documented domain."""


class FormatError(TreatSurvError, ValueError):
    """A file on disk does not follow the expected binary/JSON layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(TreatSurvError, RuntimeError):
    """Training produced a non-finite value."""
