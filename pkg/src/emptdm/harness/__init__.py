"""Experiment plumbing: configuration, episode runner, reports and the CLI."""
from .config import ExperimentConfig, load_config
from .report import emit_plots
from .runner import RunRecord, cross_task_loop, run_episode, run_suite

__all__ = ["ExperimentConfig", "load_config", "emit_plots", "RunRecord", "cross_task_loop",
           "run_episode", "run_suite"]
