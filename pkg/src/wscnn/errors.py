"""Exception types shared across the package.

Each maps onto a CLI exit code so scripts can tell configuration mistakes
from bad inputs and from numerical blow-ups.
"""


class WscnnError(Exception):
    exit_code = 1


class ConfigError(WscnnError, ValueError):
    """Invalid or unknown configuration value."""

    exit_code = 2


class DataError(WscnnError, ValueError):
    """Input data with the wrong shape, extents or content."""

    exit_code = 3


class NumericalError(WscnnError, ArithmeticError):
    """Non-finite values or a degenerate numerical problem."""

    exit_code = 4
