"""Exception hierarchy shared across the package."""


class BViTError(Exception):
    """Base class for all package errors."""


class ShapeError(BViTError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(BViTError, ValueError):
    """Invalid or unknown configuration value."""


class CheckpointError(BViTError):
    """Checkpoint file is corrupt, truncated or does not match the model."""


class DataError(BViTError):
    """Dataset file is missing, malformed or inconsistent."""


class DivergenceError(BViTError):
    """Training produced a non-finite loss."""


class DegenerateInputError(BViTError, ValueError):
    """Features have zero centered variance, so similarity is undefined."""
