"""Optimal entry and habit-formation consumption with a filtered OU drift."""

from .params import ModelConfig, figure1_config, load_config, validate

__all__ = ["ModelConfig", "figure1_config", "load_config", "validate"]
__version__ = "0.1.0"
