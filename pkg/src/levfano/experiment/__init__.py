"""Configuration, sweep orchestration and command-line interface."""

from .config import ExperimentConfig, ExperimentManifest, load_config, manifest_for
from .sweep import SweepFailed, run_sweep, synth_point_params

__all__ = ["ExperimentConfig", "ExperimentManifest", "load_config", "manifest_for",
           "SweepFailed", "run_sweep", "synth_point_params"]
