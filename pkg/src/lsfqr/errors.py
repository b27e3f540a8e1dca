"""Exception hierarchy shared across the package."""


class LsfqrError(Exception):
    """Base class for all package errors."""


class DomainError(LsfqrError, ValueError):
    """A point or level falls outside the model domain."""


class ConfigError(LsfqrError, ValueError):
    """Invalid configuration or unsupported parameter combination."""


class DataError(LsfqrError, ValueError):
    """Malformed or inconsistent input data."""


class ConvergenceError(LsfqrError, RuntimeError):
    """The solver hit its iteration limit before meeting tolerances.

    The ``diagnostics`` attribute carries the residual history so callers
    can decide whether the iterate is still usable.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
