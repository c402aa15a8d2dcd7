"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class FwensError(Exception):
    exit_code = 1


class ConfigError(FwensError, ValueError):
    """Invalid parameter or configuration value."""

    exit_code = 2


class ShapeError(ConfigError):
    """Operand shapes are incompatible."""


class DataError(FwensError, ValueError):
    """Dataset or input records violate a precondition."""

    exit_code = 3


class NumericError(FwensError, ArithmeticError):
    """Non-finite value or domain violation inside a computation."""

    exit_code = 4


class DomainError(NumericError):
    """Argument outside the mathematical domain (log of <= 0, division by zero)."""


class GraphError(FwensError, RuntimeError):
    """Misuse of the autograd graph (backward twice, non-scalar root)."""
