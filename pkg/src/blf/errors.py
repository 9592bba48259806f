"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class UsageError(ValueError):
    """Caller violated a precondition (bad argument, empty input, ...)."""


class ConfigError(ValueError):
    """Inconsistent or invalid configuration."""


class FormatError(ValueError):
    """Malformed file content (bad header, bad line, version mismatch)."""


class RangeError(IndexError):
    """Index or id outside its valid range."""
