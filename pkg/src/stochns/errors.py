"""Exception types raised across the package."""


class StochNSError(Exception):
    """Base class for all package errors."""


class OutOfRangeError(StochNSError, ValueError):
    """Evaluation time lies outside a grid field's time grid."""


class FieldDataError(StochNSError, ValueError):
    """Sampled field data is malformed or non-finite."""


class UnsupportedDomainError(StochNSError, ValueError):
    """Operation not available on the given domain."""


class NoSolutionError(StochNSError, ValueError):
    """Poisson problem has no periodic solution (nonzero mean source)."""


class MissingDataError(StochNSError, ValueError):
    """A required stored quantity (e.g. Brownian increments) is absent."""


class EscapedPathsError(StochNSError, RuntimeError):
    """Too many flow paths left the whole-space bounding box."""


class InnerDivergenceError(StochNSError, RuntimeError):
    """Inner velocity/pressure coupling failed to contract."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(StochNSError, ValueError):
    """Invalid run configuration."""


class EulerModeError(StochNSError, ValueError):
    """Operation needs noise (sigma > 0) but the run is in Euler mode."""
