"""
Experiments Package
Experiment runners behind the xreg command line: each experiment trains a
cross-regularized model for one or more seeds, compares it with its oracle
or baseline and writes plot-ready artifacts.

Modules
-------
common  : run log, atomic writes, config hash, run folders, worker pool
config  : validated experiment configuration with per-experiment defaults
runners : one runner per experiment, artifact writing, multi-seed batches
sweep   : one experiment repeated over the values of a single setting
summary : mean / std / count of run summaries across seeds
"""

from .common import WORKERS_ENV, RunLogger, config_hash, max_workers
from .config import (
    DEFAULT_CONFIGS,
    EXPERIMENTS,
    ConfigError,
    ExperimentConfig,
    load_config,
    with_seed,
)
from .runners import PASS_SHARE, RUNNERS, BatchResult, execute_run, run_experiment
from .summary import SummaryError, summarize
from .sweep import SweepResult, run_sweep

__all__ = [
    "WORKERS_ENV",
    "RunLogger",
    "config_hash",
    "max_workers",
    "DEFAULT_CONFIGS",
    "EXPERIMENTS",
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "with_seed",
    "PASS_SHARE",
    "RUNNERS",
    "BatchResult",
    "execute_run",
    "run_experiment",
    "SummaryError",
    "summarize",
    "SweepResult",
    "run_sweep",
]
