"""fluidseg: semi-weakly supervised segmentation on synthetic layered images."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    DivergenceError,
    FormatError,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "__version__",
]
