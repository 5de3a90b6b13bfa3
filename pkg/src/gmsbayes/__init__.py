"""Multiscale reduced models and chaos surrogates for Bayesian inversion of transient subsurface flow."""

from .config import ExperimentConfig, load_config
from .errors import ConfigError, IllConditionedDesign, NumericalFailure, RankDeficientSensitivity
from .experiments import convergence_sweep, diagnose, generate_data, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "IllConditionedDesign",
    "NumericalFailure",
    "RankDeficientSensitivity",
    "convergence_sweep",
    "diagnose",
    "generate_data",
    "load_config",
    "run_experiment",
]
