"""Exception types raised across the package."""


class NashGPError(Exception):
    """Base class for all package errors."""


class InvalidInputError(NashGPError, ValueError):
    """Arguments have the wrong shape, range or type."""


class UnsupportedSizeError(NashGPError, ValueError):
    """A problem dimension exceeds a configured limit."""


class NumericalError(NashGPError, ArithmeticError):
    """A factorization failed even after jitter repair."""


class IllConditionedError(NumericalError):
    """The GP covariance matrix cannot be factorized.

    ``pair`` holds the indices of the two closest design points, the usual
    culprit when this happens with zero noise.
    """

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class DegenerateUpdateError(NumericalError):
    """Conditioning on a point whose value is already known exactly."""


class EvaluationError(NashGPError, RuntimeError):
    """The black-box objective returned non-finite values."""
