"""Temporally smooth embeddings of sparse gridded weather data."""

from .config import RunConfig, parse_config, toy_config
from .errors import (ConfigError, ContractError, DataError, InvariantViolation, MetricError, SamplerError,
                     SpartaError, TrainingDiverged)

__version__ = "0.1.0"

__all__ = ["RunConfig", "parse_config", "toy_config", "SpartaError", "ConfigError", "ContractError", "DataError",
           "InvariantViolation", "MetricError", "SamplerError", "TrainingDiverged", "__version__"]
