"""Ethogram-initialised query decoding for animal behaviour recognition."""

from ._kernels import BACKEND
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    EthodecError,
    FormatError,
    GenerationError,
    NonFiniteError,
    OracleError,
    ParseError,
    TrainingError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "EthodecError",
    "FormatError",
    "GenerationError",
    "NonFiniteError",
    "OracleError",
    "ParseError",
    "TrainingError",
    "ValidationError",
]
