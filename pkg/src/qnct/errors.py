"""Exception hierarchy shared across the package."""


class QnctError(Exception):
    """Base class for all structured package errors."""


class ShapeError(QnctError):
    """Operands do not conform; message names the op and the shapes."""


class GeometryError(QnctError):
    """Scan description is inconsistent or incompatible with the data."""


class FiniteCheckError(QnctError):
    """A debug finite-value check caught NaN/Inf after a primitive op."""


class DivergenceError(QnctError):
    """Iterative solve diverged; carries the trace collected so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class MemoryGuardError(QnctError):
    """Problem size exceeds a guarded dense-storage limit."""


class CheckpointError(QnctError):
    """Parameter checkpoint file is malformed or inconsistent."""


class ConfigError(QnctError):
    """Run configuration file or key is invalid."""
