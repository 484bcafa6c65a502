"""Exception types raised by the package."""


class GCMError(Exception):
    """Base class for all package errors."""


class DimensionError(GCMError, ValueError):
    """Array shapes disagree with each other or with the model."""

    def __init__(self, message, array_name=None):
        super().__init__(message)
        self.array_name = array_name


class RankDeficientError(GCMError, ValueError):
    """A subject's growth basis does not have two independent columns."""

    def __init__(self, message, subject=None):
        super().__init__(message)
        self.subject = subject


class NumericalError(GCMError, ArithmeticError):
    """Non-finite values, failed factorizations or ill-conditioned solves."""


class EstimationError(GCMError):
    """A covariance estimation step failed; ``step`` names which one."""

    def __init__(self, message, step=None):
        super().__init__(f"{step}: {message}" if step else message)
        self.step = step


class IngestError(GCMError, ValueError):
    """Input table is malformed."""
