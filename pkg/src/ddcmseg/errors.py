"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending axis."""


class ConfigError(ValueError):
    """Invalid configuration file, option value, or model specification."""


class DataError(RuntimeError):
    """Dataset layout, palette, or tile contents are unusable."""


class NumericError(ArithmeticError):
    """A numeric failure (NaN/Inf) was detected during training."""


class CheckpointError(RuntimeError):
    """Checkpoint or tensor file is malformed or inconsistent with the model."""
