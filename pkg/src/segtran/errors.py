"""Exception types shared across the package."""


class SegtranError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SegtranError, ValueError):
    """Operands have incompatible shapes; the message names both shapes."""


class ConfigError(SegtranError, ValueError):
    """A configuration value is invalid or inconsistent."""


class UsageError(SegtranError, ValueError):
    """An API was called in a way its contract forbids."""


class NumericsError(SegtranError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class CheckpointFormatError(SegtranError, ValueError):
    """A checkpoint byte stream is malformed or truncated."""
