"""Exception hierarchy shared by all restrack modules."""


class RestrackError(Exception):
    """Base class for every error raised by restrack."""


class DomainError(RestrackError, ValueError):
    """Frequency outside the single-mode validity window of the model."""


class CalibrationRangeError(DomainError):
    """Frequency outside the calibrated band, or non-positive amplitude gain."""


class DegenerateMeasurementError(RestrackError, ValueError):
    """Zero response amplitude; nothing to invert."""


class InconsistentMeasurementError(RestrackError, ValueError):
    """Measured (amplitude, phase) pair lies outside the model manifold."""


class ResonanceNotBracketedError(RestrackError, ValueError):
    """Amplitude maximum of a sweep sits on the sweep boundary."""


class ConvergenceError(RestrackError, RuntimeError):
    """Least-squares fit failed to converge."""

    def __init__(self, message, residual_rms=float("nan"), nfev=0):
        super().__init__(message)
        self.residual_rms = residual_rms
        self.nfev = nfev


class AliasingError(RestrackError, ValueError):
    """Analysis frequency at or above the Nyquist limit."""


class ShortWindowError(RestrackError, ValueError):
    """Window holds fewer than two periods of the analysis frequency."""


class ZeroDriveError(RestrackError, ValueError):
    """Transmitted signal has no measurable component at the analysis frequency."""


class NoDataError(RestrackError, ValueError):
    """Not enough samples inside the requested window."""


class ConfigError(RestrackError, ValueError):
    """Invalid run configuration; ``path`` names the offending key."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class ProtocolError(RestrackError, RuntimeError):
    """Plant or tracker failure inside a protocol run."""

    def __init__(self, iteration, cause):
        super().__init__(f"iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause
