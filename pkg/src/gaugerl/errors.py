"""Exception hierarchy shared by every module."""


class GaugeRLError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(GaugeRLError, ValueError):
    pass


class NumericalFailure(GaugeRLError, ArithmeticError):
    """An LP stalled or produced a point that fails its own KKT check."""


class NotACSet(GaugeRLError, ValueError):
    pass


class ZeroInput(GaugeRLError, ValueError):
    pass


class StateOutsideS(GaugeRLError, ValueError):
    pass


class StateOnBoundary(GaugeRLError, ValueError):
    pass


class CertificateInvalid(GaugeRLError, ValueError):
    pass


class NotConverged(GaugeRLError, RuntimeError):
    pass


class EmptyInterior(GaugeRLError, ValueError):
    pass


class NoValidGain(GaugeRLError, RuntimeError):
    pass


class SingularInertia(GaugeRLError, ValueError):
    pass


class DisconnectedNetwork(GaugeRLError, ValueError):
    pass


class NonBoxInputSet(GaugeRLError, ValueError):
    pass


class TrainingAborted(GaugeRLError, RuntimeError):
    """Raised by the NaN guard during training."""
