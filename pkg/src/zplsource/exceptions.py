from typing import Optional


class ZplSourceError(Exception):
    """Base exception for all zplsource errors."""

    pass


class DomainError(ZplSourceError, ValueError):
    """Raised when a numeric argument lies outside its physical domain."""

    pass


class CapacityError(ZplSourceError):
    """Raised when a simulation would exceed the configured tag capacity."""

    def __init__(self, expected: float, capacity: int):
        super().__init__(
            f"Simulation would produce ~{expected:.3g} tags, "
            f"above the capacity of {capacity}"
        )
        self.expected = expected
        self.capacity = capacity


class ContractViolationError(ZplSourceError):
    """Raised when an input breaks a caller contract (e.g. unsorted tags)."""

    pass


class ConsistencyError(ZplSourceError):
    """Raised when an internal geometric or numerical check fails."""

    pass


class TagFormatError(ZplSourceError):
    """Raised when a time-tag file cannot be decoded."""

    pass


class EstimationError(ZplSourceError):
    """Base class for curve-fitting failures."""

    pass


class FitConvergenceError(EstimationError):
    """Raised when the optimizer stops without converging."""

    def __init__(
        self, message: str, last_params: Optional[dict] = None, n_iterations: int = 0
    ):
        super().__init__(message)
        self.last_params = dict(last_params or {})
        self.n_iterations = n_iterations


class InsufficientDataError(EstimationError):
    """Raised when the data cannot support the requested fit."""

    pass


class UnresolvableError(EstimationError):
    """Raised when a feature is narrower than the sampling can resolve."""

    pass


class SpotNotFoundError(EstimationError):
    """Raised when an image has no spot above the background."""

    pass


class ConfigurationError(ZplSourceError):
    """Raised when there's an invalid configuration setting."""

    def __init__(self, message: str, config_key: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.config_key = config_key


class AcceptanceError(ZplSourceError):
    """Raised when measured quantities fall outside their expected ranges."""

    def __init__(self, message: str, rows: Optional[list] = None):
        super().__init__(message)
        self.rows = list(rows or [])
