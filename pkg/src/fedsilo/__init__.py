"""Simulator for hierarchical collaboration patterns in cross-silo federated learning."""
from .config import ExperimentConfig, parse_config
from .fed_train import Federation, run_experiment

__all__ = ["ExperimentConfig", "Federation", "parse_config", "run_experiment"]
__version__ = "0.1.0"
