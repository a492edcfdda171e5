"""Error types raised by the numerical services."""


class ReconLabError(Exception):
    """Base class for all errors raised by the lab."""


class InvalidArgumentError(ReconLabError, ValueError):
    """Inputs violate a documented precondition."""


class ResolutionError(ReconLabError):
    """A wavelet level cannot be resolved on the available grid."""


class ResourceLimitError(ReconLabError):
    """An allocation would exceed the configured memory cap."""


class UnsupportedOperationError(ReconLabError):
    """The object cannot perform the requested operation."""


class SupportError(ReconLabError):
    """A test function or wavelet leaves the admissible domain."""


class HypothesisViolationError(ReconLabError):
    """Regularity exponents violate the hypotheses of a construction."""


class NotAdaptedError(ReconLabError):
    """A field that must be adapted to the noise filtration is not."""


class ConsistencyError(ReconLabError):
    """Two formulas that must agree numerically do not."""


class DivergenceError(ReconLabError):
    """An iteration failed to converge."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
