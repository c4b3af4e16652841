"""Derivative-based global sensitivity analysis of statistical-model
parameters through a loss-induced Gibbs density."""

__version__ = "0.1.0"

from .analysis import analyze, correlation_matrix, perturbation_curves, robustness_derivative, sensitivity_indices
from .calibrate import CalibrationConfig, CalibrationResult, calibrate
from .models import GibbsDensity, LossModel, QuadraticOracleModel, SyntheticSpaceTimeModel, load_model
from .sampler import ChainSet, SamplerConfig, psrf, run_chain, run_chain_set

__all__ = [
    "LossModel",
    "GibbsDensity",
    "SyntheticSpaceTimeModel",
    "QuadraticOracleModel",
    "load_model",
    "CalibrationConfig",
    "CalibrationResult",
    "calibrate",
    "SamplerConfig",
    "ChainSet",
    "run_chain",
    "run_chain_set",
    "psrf",
    "sensitivity_indices",
    "robustness_derivative",
    "perturbation_curves",
    "correlation_matrix",
    "analyze",
]
