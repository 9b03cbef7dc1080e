"""Exception types shared across the package."""


class BpregError(Exception):
    """Base class for all package-specific errors."""


class VolumeFormatError(BpregError, ValueError):
    """A volume file exists but its content violates the expected format."""


class VolumeIOError(BpregError, OSError):
    """A volume file could not be read at all."""


class ConfigError(BpregError, ValueError):
    """An invalid configuration value or combination."""


class SamplingError(BpregError, RuntimeError):
    """No feasible training item could be sampled from a volume."""


class EmptyCurveError(BpregError, RuntimeError):
    """Score-curve cleaning removed every slice."""


class EmptyRegionError(BpregError, RuntimeError):
    """Known-region cropping would remove the whole object."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class TrainingDivergedError(BpregError, RuntimeError):
    """The training loss became non-finite."""


class ModelWeightsError(BpregError, RuntimeError):
    """Requested pretrained weights are not available."""
