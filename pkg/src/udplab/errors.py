"""Exception hierarchy shared by all udplab modules."""


class UdplabError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(UdplabError):
    """Operand dimensions are incompatible."""


class NumericError(UdplabError):
    """A computation produced or received non-finite values."""


class FormatError(UdplabError):
    """An on-disk container is malformed (bad magic, truncation, mismatch)."""


class UsageError(UdplabError):
    """An operation was called with arguments outside its contract."""


class TrainingError(UdplabError):
    """Training diverged. Carries the epoch at which it happened."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class GenerationError(UdplabError):
    """A poison generator failed to produce a valid perturbation set."""


class DetectionError(UdplabError):
    """A detector could not produce a verdict."""


class DefenseError(UdplabError):
    """A defense pipeline stage failed. Carries the stage name."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class MeasurementError(UdplabError):
    """A measurement (e.g. separability rate) could not be obtained."""


class CertificationError(UdplabError):
    """A certificate's preconditions do not hold on the given instance."""
