"""Exception types shared across the package."""


class HavitError(Exception):
    pass


class DimensionError(HavitError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(HavitError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(HavitError, RuntimeError):
    """A caller violated a documented precondition."""


class FormatError(HavitError, ValueError):
    """On-disk data does not match the expected binary layout."""


class NumericalError(HavitError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""
