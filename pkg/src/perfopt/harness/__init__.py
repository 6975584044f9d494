"""Experiment harness: configs and presets, grid execution, emission, validation, CLI."""

from perfopt.harness.config import ExperimentConfig, GridSpec, load_config, preset_config
from perfopt.harness.runner import AggregateResult, CellResult, run_experiment, run_sweep

__all__ = [
    "AggregateResult",
    "CellResult",
    "ExperimentConfig",
    "GridSpec",
    "load_config",
    "preset_config",
    "run_experiment",
    "run_sweep",
]
