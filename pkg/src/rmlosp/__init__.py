"""Joint online parameter estimation and sensor placement for a spectral SPDE model."""

__version__ = "0.1.0"

from .spectral import ModelParams, SensorArray, assemble_system, build_truncation  # noqa: E402
from .kalman import FilterState, filter_step, solve_are  # noqa: E402
from .experiments import ExperimentConfig, preset, run_trial, run_experiment  # noqa: E402

__all__ = [
    "ModelParams", "SensorArray", "assemble_system", "build_truncation",
    "FilterState", "filter_step", "solve_are",
    "ExperimentConfig", "preset", "run_trial", "run_experiment",
]
