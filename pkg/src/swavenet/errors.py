"""Exception types shared across the package."""


class SWaveNetError(Exception):
    """Base class for all library errors."""


class ShapeError(SWaveNetError):
    """Tensor extents incompatible with the requested operation."""


class ConfigError(SWaveNetError):
    """Invalid hyperparameter, range, or configuration field."""


class FormatError(SWaveNetError):
    """Malformed binary file. Carries the byte offset of the defect."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyError(SWaveNetError):
    """An input that must contain data is empty."""


class NumericsError(SWaveNetError):
    """NaN/Inf produced where finite values are required."""


class TrainingAbort(NumericsError):
    """Training stopped because a step produced a non-finite objective."""

    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step
