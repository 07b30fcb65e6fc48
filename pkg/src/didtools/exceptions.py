"""Exception types shared across the package."""


class DidtoolsError(Exception):
    """Base class for all errors raised by didtools."""


class ValidationError(DidtoolsError):
    """Invalid input: a dataset, model spec, or spec file failed validation."""


class AbsorptionError(DidtoolsError):
    """Fixed-effect absorption failed to converge.

    Carries the worst relative within-group weighted mean observed in the
    final sweep so callers can diagnose near-collinear fixed-effect layouts.
    """

    def __init__(self, message: str, max_within_mean: float):
        super().__init__(message)
        self.max_within_mean = max_within_mean


class CollinearityError(DidtoolsError):
    """A required design column was dropped or a matrix is rank deficient."""


class EstimationError(DidtoolsError):
    """Numerical failure inside an estimator (singular systems, empty designs)."""


class NotOveridentifiedError(DidtoolsError):
    """An overidentification test was requested for an exactly identified model."""


class SupportError(DidtoolsError):
    """A changes-in-changes transport left the support of the reference cell."""
