"""Exception types shared across the package."""


class UnrollCSError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(UnrollCSError, ValueError):
    """Tensor/operator shapes are inconsistent with the requested operation."""


class ConfigurationError(UnrollCSError, ValueError):
    """A configuration value is outside its documented domain."""


class ContractError(UnrollCSError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NumericError(UnrollCSError, ArithmeticError):
    """Non-finite values were encountered where finite ones are required."""


class DataError(UnrollCSError, RuntimeError):
    """A dataset or input file is unusable (empty, too small, corrupt)."""
