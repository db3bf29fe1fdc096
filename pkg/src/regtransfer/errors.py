"""Exception types raised across the package."""


class RegTransferError(Exception):
    """Base class for package errors."""


class QuadratureError(RegTransferError):
    """A quadrature failed to reach its tolerance."""


class DivergentIntegralError(QuadratureError):
    """An integral that should be finite diverges for the given model."""


class TruncationError(RegTransferError):
    """The truncated-domain tail estimate exceeds the tolerance."""


class SingularMatrixError(RegTransferError):
    """A matrix that must be invertible is (numerically) singular."""


class ScheduleError(RegTransferError):
    """The theta-sequence is too short for the requested schedule."""


class DivergentBoundError(RegTransferError):
    """A supremum entering a regularity bound is infinite."""


class ConfigError(RegTransferError):
    """Invalid experiment configuration."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
