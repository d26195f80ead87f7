"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DegenerateBatchError(ValueError):
    """Batch has no anchor with both a positive and a negative sample."""
