"""Exception types shared across the package."""
from .params import CheckpointError  # noqa: F401
from .tensor import DimensionError, TapeError  # noqa: F401


class ConfigError(ValueError):
    """Inconsistent model or run configuration."""


class InputError(ValueError):
    """Input raster does not match the encoder configuration."""


class LengthError(ValueError):
    """Assembled sequence exceeds the language model's maximum length."""


class TrainingError(RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""
