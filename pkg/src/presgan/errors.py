"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, shape mismatch, or malformed input file."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise failed numerically."""


class CheckpointError(ConfigError):
    """A checkpoint file could not be parsed or does not match its networks."""

    def __init__(self, message, offset=None, segment=None):
        super().__init__(message)
        self.offset = offset
        self.segment = segment
