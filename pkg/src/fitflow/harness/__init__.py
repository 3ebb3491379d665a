"""Experiment orchestration and the command-line interface."""

from .config import RunConfig, build_config, ci_profile, config_hash, stage_hash
from .pipeline import Pipeline, run_experiment

__all__ = ["Pipeline", "RunConfig", "build_config", "ci_profile", "config_hash", "run_experiment", "stage_hash"]
