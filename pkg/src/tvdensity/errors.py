"""Exception types shared across the package."""


class TvdError(Exception):
    """Base class for all package errors."""


class DataError(TvdError):
    """Raised for empty or malformed input data ("no data")."""


class SupportError(TvdError):
    """Raised when points fall outside the unit interval ("out of support")."""


class SolverError(TvdError):
    """Raised when an optimizer fails irrecoverably."""


class TargetingError(TvdError):
    """Raised when a fluctuation step cannot be solved."""


class ExperimentError(TvdError):
    """Raised when a simulation run fails too often to be trusted."""
