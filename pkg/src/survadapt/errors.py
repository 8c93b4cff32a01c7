"""Typed exceptions shared across the package.

Every error that a caller can act on gets its own class; the CLI maps them
onto exit codes (invalid config -> 2, infeasible boundary -> 3,
accuracy not reached -> 4).
"""


class SurvAdaptError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgumentError(SurvAdaptError, ValueError):
    """An argument violates a documented precondition."""


class InvalidConfigError(SurvAdaptError, ValueError):
    """A scenario or design configuration failed validation."""


class InfeasibleAlternativeError(SurvAdaptError):
    """The hazard-ratio alternative cannot be realized with nonnegative intensities.

    Carries the first time point at which the solved intensity turns negative.
    """

    def __init__(self, message: str, offending_time: float):
        super().__init__(message)
        self.offending_time = float(offending_time)

    def __reduce__(self):
        # extra constructor arguments must survive pickling across processes
        return (type(self), (self.args[0], self.offending_time))


class DegenerateInterimError(SurvAdaptError):
    """The interim variance estimate is zero; no standardized statistic exists."""


class DegenerateVarianceError(SurvAdaptError):
    """A conditional or stage variance needed by a test is not positive."""


class NonIncreasingInformationError(SurvAdaptError):
    """A variance increment between analyses is not positive."""


class EstimateUnavailableError(SurvAdaptError):
    """A plug-in estimate has a zero denominator at the requested time."""


class InfeasibleLevelError(SurvAdaptError):
    """The stage-2 error budget lies outside the attainable range of G."""


class AccuracyNotReachedError(SurvAdaptError):
    """Monte Carlo integration did not meet the requested tolerance.

    The partial estimate and its standard error are attached for inspection.
    """

    def __init__(self, message: str, partial_value: float, standard_error: float):
        super().__init__(message)
        self.partial_value = float(partial_value)
        self.standard_error = float(standard_error)

    def __reduce__(self):
        return (type(self), (self.args[0], self.partial_value, self.standard_error))


class ConditioningError(SurvAdaptError):
    """A covariance matrix is singular beyond the documented regularization."""


class ProtocolViolationError(SurvAdaptError):
    """Stage ordering is broken (e.g. final analysis not after the interim)."""
