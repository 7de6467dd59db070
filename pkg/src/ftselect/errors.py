"""Exception hierarchy shared across the package."""


class FtselectError(Exception):
    """Base class for all package errors."""


class DimensionError(FtselectError, ValueError):
    """Shapes or lengths of inputs do not agree."""


class NumericalError(FtselectError, ArithmeticError):
    """A numerical routine produced an invalid result (e.g. indefinite kernel)."""


class InsufficientDataError(FtselectError, ValueError):
    """Too few observations for the requested fit."""


class TrainingDivergence(FtselectError, RuntimeError):
    """Gradient descent blew up. ``partial`` holds whatever trace was recorded."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ProviderError(FtselectError, RuntimeError):
    """A curve provider failed mid-selection. ``partial`` holds the trace so far."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ValidationError(FtselectError, ValueError):
    """Malformed input file or configuration."""
