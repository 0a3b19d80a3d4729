"""
Experiments - Sweeps
Repeat one of the noisy-network experiments over the values of a single
setting: the Monte-Carlo sample count, the regularization interval, the
regularization-set fraction or any other train setting. Every value runs
cfg.n_seeds seeds; runs go to <out>/sweep_<param>/<value>/seed_<seed>.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .common import artifact_header, config_hash, max_workers, run_jobs, write_atomic
from .config import ConfigError, ExperimentConfig
from .runners import PASS_SHARE, aggregate_checks, execute_job, seed_jobs

SWEEP_TABLE = "sweep_summary.csv"
SWEEP_METRICS = ("xreg_test_acc", "baseline_test_acc", "sigma_sum", "reg_overhead", "xreg_ece")

# Settings whose cheap value should match the expensive one:
# param -> (cheap value, reference value, tolerance on mean test accuracy)
MATCHED_VALUES = {
    "mc_samples": (3, 10, 0.01),
    "reg_interval": (30, 1, 0.01),
    "reg_fraction": (0.01, 0.1, 0.02),
}

# Test split held fixed when the regularization fraction is swept
SWEEP_TEST_FRACTION = 0.2


def value_label(value: float) -> str:
    return f"{value:g}"


def point_config(cfg: ExperimentConfig, value: float) -> ExperimentConfig:
    """Config of the base experiment with the swept setting set to value."""
    param = cfg.sweep.param
    data = cfg.model_dump()
    data["experiment"] = cfg.sweep.base
    data["sweep"] = None
    if param == "reg_fraction":
        train_fraction = 1.0 - SWEEP_TEST_FRACTION - value
        data["data"]["fractions"] = (train_fraction, value, SWEEP_TEST_FRACTION)
    else:
        data["train"][param] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValueError as exc:
        raise ConfigError([f"sweep value {param}={value_label(value)}: {exc}"]) from None


@dataclass
class SweepResult:
    param: str
    table: pd.DataFrame
    pass_shares: Dict[str, float]
    checks: Dict[str, bool]
    summaries: List[Dict]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def sweep_table(param: str, values: List[float], summaries: List[List[Dict]]) -> pd.DataFrame:
    """Mean, sample std and count of each headline metric per swept value."""
    rows = []
    for value, runs in zip(values, summaries):
        row = {param: value, "runs": len(runs),
               "completed": sum(s["status"] == "completed" for s in runs)}
        for metric in SWEEP_METRICS:
            numbers = [s["metrics"][metric] for s in runs if metric in s.get("metrics", {})]
            if not numbers:
                continue
            row[f"{metric}_mean"] = float(np.mean(numbers))
            row[f"{metric}_std"] = float(np.std(numbers, ddof=1)) if len(numbers) > 1 else 0.0
        rows.append(row)
    return pd.DataFrame(rows)


def matched_value_checks(param: str, table: pd.DataFrame) -> Dict[str, bool]:
    if param not in MATCHED_VALUES or "xreg_test_acc_mean" not in table:
        return {}
    cheap, reference, tol = MATCHED_VALUES[param]
    by_value = table.set_index(param)["xreg_test_acc_mean"]
    if cheap not in by_value.index or reference not in by_value.index:
        return {}
    gap = abs(by_value[cheap] - by_value[reference])
    return {f"{param}_{value_label(cheap)}_matches_{value_label(reference)}": bool(gap <= tol)}


def run_sweep(cfg: ExperimentConfig, workers: Optional[int] = None,
              progress_callback=None) -> SweepResult:
    """Run every (value, seed) pair on the worker pool and tabulate the results."""
    if cfg.sweep is None:
        raise ConfigError(["the sweep experiment needs a sweep section"])
    param, values = cfg.sweep.param, list(cfg.sweep.values)
    workers = max_workers() if workers is None else workers
    points = [point_config(cfg, v) for v in values]
    jobs, owners = [], []
    for i, (value, point) in enumerate(zip(values, points)):
        point_jobs = seed_jobs(point, f"sweep_{param}/{value_label(value)}", echo=workers <= 1)
        jobs.extend(point_jobs)
        owners.extend([i] * len(point_jobs))
    results = run_jobs(execute_job, jobs, workers, progress_callback)

    per_value: List[List[Dict]] = [[] for _ in values]
    for owner, summary in zip(owners, results):
        per_value[owner].append(summary)

    table = sweep_table(param, values, per_value)
    header = artifact_header(config_hash(cfg), cfg.seed)
    body = table.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    write_atomic(Path(cfg.out_dir) / f"sweep_{param}" / SWEEP_TABLE, f"# {header}\n" + body)

    batch = aggregate_checks(results)
    checks = {"all_runs_completed": batch.completed}
    if cfg.checks:
        checks.update(matched_value_checks(param, table))
        checks.update({f"{name}_share": share >= PASS_SHARE
                       for name, share in batch.pass_shares.items()})
    return SweepResult(param, table, batch.pass_shares, checks, results)
