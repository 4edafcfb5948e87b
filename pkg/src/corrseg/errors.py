"""Exception types shared across the package."""


class CorrsegError(Exception):
    """Base class for all corrseg errors."""


class ShapeError(CorrsegError, ValueError):
    """Incompatible array shapes or dimensions."""


class AutodiffError(CorrsegError, RuntimeError):
    """Misuse of the reverse-mode differentiation machinery."""


class ConfigError(CorrsegError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataFormatError(CorrsegError, ValueError):
    """Malformed on-disk data (PPM/PGM/manifest/checkpoint)."""


class NumericsError(CorrsegError, ArithmeticError):
    """Non-finite values encountered where finite ones are required."""
