"""Exception types raised across the package."""


class FftcsError(Exception):
    """Base class for all package errors."""


class SpecValidationError(FftcsError, ValueError):
    """A problem instance or run configuration violates an invariant.

    ``path`` names the offending field, e.g. ``"constraints.Delta_u"``.
    """

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class NonFiniteEvaluation(FftcsError):
    pass


class NonPositiveDilation(FftcsError):
    pass


class DimensionMismatch(FftcsError, ValueError):
    pass


class IntegrationDiverged(FftcsError):
    def __init__(self, message, interval=None):
        self.interval = interval
        if interval is not None:
            message = f"interval {interval}: {message}"
        super().__init__(message)


class MalformedReference(FftcsError, ValueError):
    pass


class SingularCovariance(FftcsError):
    pass


class NegativeCovariance(FftcsError):
    """Covariance eigenvalue below the round-off floor."""


class SubproblemFailed(FftcsError):
    def __init__(self, message, history=None):
        self.history = history or []
        super().__init__(message)


class WarmStartInfeasible(FftcsError):
    pass


class NonFiniteState(FftcsError):
    pass
