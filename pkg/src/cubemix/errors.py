"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with an operation."""


class ValidationError(ValueError):
    """An argument is outside its allowed domain (non-finite weights, bad sizes)."""


class ConfigError(ValueError):
    """A network, training or run configuration is invalid."""


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""
