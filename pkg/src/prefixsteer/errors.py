"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or infinite value showed up where finite numbers are required."""


class ConfigError(ValueError):
    """A configuration object violates its invariants."""


class CapacityError(ValueError):
    """A sequence does not fit in the model's context window."""


class DomainError(ValueError):
    """An argument is outside the domain of the operation."""


class DataError(ValueError):
    """Training data is unusable (e.g. a single class)."""
