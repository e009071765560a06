"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so raise the most specific
type available.
"""


class CausalStonetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CausalStonetError, ValueError):
    """Invalid configuration or hyperparameter values."""


class ShapeError(CausalStonetError, ValueError):
    """Array shapes inconsistent with the network configuration."""


class DataError(CausalStonetError, ValueError):
    """Invalid or inconsistent dataset contents."""


class NumericError(CausalStonetError, ArithmeticError):
    """A computation produced non-finite values."""
