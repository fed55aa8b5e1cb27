"""Exception types shared across the package."""


class OverNetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(OverNetError, ValueError):
    """Shapes, channel counts or hyperparameters that cannot work together."""


class UsageError(OverNetError, ValueError):
    """An operation was called outside its preconditions."""


class NumericError(OverNetError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class CheckpointError(OverNetError):
    """A checkpoint file is corrupt or does not match its embedded config."""
