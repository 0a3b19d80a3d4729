"""
Experiments - Summaries
Aggregate the summary.json files below a results folder into mean, sample
standard deviation and count per metric.
"""

import json
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd

from .common import SUMMARY_NAME, write_atomic

AGGREGATE_NAME = "summary_aggregate.csv"


class SummaryError(RuntimeError):
    """The run summaries cannot be aggregated."""


def collect_summaries(directory) -> List[dict]:
    directory = Path(directory)
    if not directory.is_dir():
        raise SummaryError(f"Results folder not found: {directory}")
    summaries = []
    for path in sorted(directory.rglob(SUMMARY_NAME)):
        try:
            summary = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise SummaryError(f"Cannot read {path}: {exc}") from None
        summary["_path"] = str(path)
        summaries.append(summary)
    if not summaries:
        raise SummaryError(f"No {SUMMARY_NAME} files below {directory}")
    return summaries


def aggregate(summaries: List[dict]) -> pd.DataFrame:
    """
    One row per numeric metric: mean, std (ddof=1, 0 for a single run) and
    count. Summaries from different configurations are refused.
    """
    hashes = {}
    for summary in summaries:
        hashes.setdefault(summary.get("config_hash"), []).append(summary["_path"])
    if len(hashes) > 1:
        listing = "\n".join(f"  {h}: {', '.join(paths)}" for h, paths in hashes.items())
        raise SummaryError(f"Summaries come from {len(hashes)} different configurations:\n{listing}")

    values = {}
    for summary in summaries:
        for name, value in summary.get("metrics", {}).items():
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                values.setdefault(name, []).append(float(value))
    rows = []
    for name, numbers in values.items():
        numbers = np.asarray(numbers)
        std = float(np.std(numbers, ddof=1)) if numbers.size > 1 else 0.0
        rows.append({"metric": name, "mean": float(np.mean(numbers)), "std": std,
                     "count": int(numbers.size)})
    return pd.DataFrame(rows, columns=["metric", "mean", "std", "count"])


def summarize(directory) -> pd.DataFrame:
    """Aggregate every run below directory and write summary_aggregate.csv there."""
    frame = aggregate(collect_summaries(directory))
    body = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    write_atomic(Path(directory) / AGGREGATE_NAME, body)
    return frame
