"""Exception hierarchy shared by all modules; the CLI maps these to exit codes."""


class ConfigError(ValueError):
    """Invalid configuration or arguments (exit code 2)."""


class DataError(ValueError):
    """Missing, malformed or inconsistent input data (exit code 3)."""


class NumericError(ArithmeticError):
    """Non-finite values or degenerate arithmetic (exit code 4)."""


class ShapeError(ValueError):
    """Tensor shapes that do not fit an operation."""
