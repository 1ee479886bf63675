"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or malformed input file."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""
