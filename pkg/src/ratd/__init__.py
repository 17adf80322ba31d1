"""Retrieval-augmented diffusion forecasting for multivariate time series."""

from .config import ExperimentConfig, load_config
from .errors import ConfigError, MissingArtifactError, NumericalError

__all__ = ["ExperimentConfig", "load_config", "ConfigError", "MissingArtifactError", "NumericalError"]
__version__ = "0.1.0"
