"""Exception types shared across the package."""


class RSTPMError(Exception):
    """Base class for all package errors."""


class ShapeError(RSTPMError, ValueError):
    pass


class StateError(RSTPMError, RuntimeError):
    pass


class NumericError(RSTPMError, ArithmeticError):
    pass


class ConfigError(RSTPMError, ValueError):
    pass


class FormatError(RSTPMError, ValueError):
    """Raised when an archive is truncated, corrupted or of the wrong version."""


class IngestionError(RSTPMError, OSError):
    pass


class InputError(RSTPMError, ValueError):
    pass


class UndefinedMetricError(RSTPMError, ValueError):
    """The metric is undefined for the given labels (e.g. only one class)."""
