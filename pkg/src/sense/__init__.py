"""Attention-based multistation earthquake early warning on synthetic data."""

from .config import ModelConfig, profile
from .model import SenseModel

__version__ = "0.1.0"

__all__ = ["ModelConfig", "SenseModel", "profile", "__version__"]
