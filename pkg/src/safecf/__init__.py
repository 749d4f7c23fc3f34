"""Saliency-guided counterfactual explanations for grey-box image classifiers."""

from safecf.errors import (
    ConfigError,
    DataError,
    InvalidTargetError,
    NumericalError,
    ShapeError,
    UndefinedMetricError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "InvalidTargetError",
    "NumericalError",
    "ShapeError",
    "UndefinedMetricError",
]
