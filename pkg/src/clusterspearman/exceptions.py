"""Exception hierarchy shared by every module of the package."""


class ClusterSpearmanError(Exception):
    """Base class for all errors raised by this package."""


class DataError(ClusterSpearmanError, ValueError):
    """Malformed or inconsistent input data."""


class DegenerateInputError(ClusterSpearmanError, ValueError):
    """A correlation or ICC is undefined for the supplied data (e.g. a constant variable)."""


class NumericalError(ClusterSpearmanError, ArithmeticError):
    """Base class for numerical failures (exit code 3 in the CLI)."""


class ConvergenceError(NumericalError):
    """An iterative solver stopped before meeting its tolerance."""

    def __init__(self, message, gradient_norm=None, iterations=None):
        super().__init__(message)
        self.gradient_norm = gradient_norm
        self.iterations = iterations


class SeparationError(NumericalError):
    """A cluster coefficient diverges because the cluster is completely separated."""

    def __init__(self, message, cluster_id=None):
        super().__init__(message)
        self.cluster_id = cluster_id


class InstabilityError(NumericalError):
    """An estimator formula has a non-positive radicand or singular system."""


class InferenceUnsupportedError(ClusterSpearmanError, ValueError):
    """The requested analytic inference route does not apply to this configuration."""
