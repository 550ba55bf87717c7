"""Exception types shared across the package."""


class BackLinkError(Exception):
    """Base class for all package errors."""


class ConfigError(BackLinkError, ValueError):
    """Invalid configuration or hyperparameter."""


class ShapeError(BackLinkError, ValueError):
    """Incompatible tensor shapes."""


class TapeError(BackLinkError, RuntimeError):
    """Misuse of a differentiation tape (unknown seed, missing node)."""


class DataError(BackLinkError, ValueError):
    """Malformed or inconsistent dataset file."""


class SchedulingError(BackLinkError, RuntimeError):
    """Pipeline worker stalled past its bounded wait, or a cyclic trace."""
