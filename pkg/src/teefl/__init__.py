"""Simulator for federated learning across software-modeled trusted enclaves."""

from teefl.config import ExperimentConfig, parse_config
from teefl.metrics import MetricsLog
from teefl.protocol import Simulation, run_experiment

__all__ = ["ExperimentConfig", "MetricsLog", "Simulation", "parse_config", "run_experiment"]
__version__ = "0.1.0"
