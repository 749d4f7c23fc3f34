"""Exception types shared across the package."""


class SafeCFError(Exception):
    """Base class for all package errors."""


class ShapeError(SafeCFError, ValueError):
    """An input tensor does not have the shape the callee expects."""


class ConfigError(SafeCFError, ValueError):
    """Invalid configuration, dataset or request parameters."""


class InvalidTargetError(SafeCFError, ValueError):
    """A counterfactual was requested for the label the input already has."""


class UndefinedMetricError(SafeCFError, ValueError):
    """A metric was requested on input for which it is not defined."""


class NumericalError(SafeCFError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class DataError(SafeCFError, OSError):
    """A dataset file is missing, unreadable or corrupt."""
