"""Desk-scale federated contrastive learning with feature fusion and neighborhood matching."""

from .config import ExperimentConfig, load_config
from .federation import run_experiment

__all__ = ["ExperimentConfig", "load_config", "run_experiment"]
__version__ = "0.1.0"
