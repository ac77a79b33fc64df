"""Error taxonomy shared across the package."""


class ConfigError(ValueError):
    """A network/run was configured inconsistently (shape or enum mismatch)."""


class UsageError(ValueError):
    """A caller violated an operation precondition."""


class LoadError(ValueError):
    """A spec/config file failed validation; message carries the field path."""


class NumericalError(ArithmeticError):
    """Non-finite values appeared where finite arithmetic is required."""
