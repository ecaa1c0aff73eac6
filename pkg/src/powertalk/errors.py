"""Exception hierarchy."""


class PowertalkError(Exception):
    """Base class for all package errors."""


class NonConvergence(PowertalkError):
    """Newton iteration for the steady state did not converge."""


class ZeroVoltageCollapse(PowertalkError):
    """A Newton iterate produced a non-positive bus voltage."""


class TooFewSlots(PowertalkError, ValueError):
    pass


class ExcitationNotFound(PowertalkError):
    """No M-phase sequence satisfying the rank conditions was found."""


class SufficientExcitationViolated(PowertalkError):
    """Rank conditions on the residual Jacobians do not hold."""


class NearZeroChannel(PowertalkError):
    """An estimated channel gain is too small to demodulate."""


class MaxIterExceeded(PowertalkError):
    """Iterative estimator hit its iteration cap.

    The best iterate is attached as ``result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
