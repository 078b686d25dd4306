"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Bad shapes, sizes or argument values."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or received non-finite input."""


class ConfigurationError(ValueError):
    """A run configuration is incomplete or inconsistent."""
