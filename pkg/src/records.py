"""
Run Records Module
Per-epoch traces of cross-regularization runs and their CSV/JSON forms, plus
the data-access monitor that checks the training loops keep the training and
regularization partitions apart.
"""

import json
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .datagen import Dataset, SplitDataset
from .numkit import RNG_ALGORITHM

BASE_COLUMNS = ["epoch", "train_loss", "reg_loss", "test_metric", "gen_gap"]

STATUS_COMPLETED = "completed"
STATUS_ABORTED = "aborted"


@dataclass
class RunRecord:
    """
    Trace of one training run.

    rows hold the base columns, the regularization-parameter snapshot
    (rho_0 ... rho_{k-1}) and any extra per-epoch values.
    """

    regularizer: str
    rho_names: List[str]
    seed: int
    config: Dict[str, Any] = field(default_factory=dict)
    rows: List[Dict[str, float]] = field(default_factory=list)
    status: str = STATUS_COMPLETED
    message: str = ""
    warnings: List[str] = field(default_factory=list)
    wall_time: float = 0.0
    rng_algorithm: str = RNG_ALGORITHM
    isolation: Dict[str, int] = field(default_factory=dict)
    counters: Dict[str, float] = field(default_factory=dict)
    _started: float = field(default_factory=time.perf_counter, init=False, repr=False)

    def add_row(self, epoch: int, train_loss: float, reg_loss: float, test_metric: float,
                gen_gap: float, rho: Sequence[float], **extras: float):
        rho = np.atleast_1d(np.asarray(rho, dtype=np.float64))
        if rho.shape[0] != len(self.rho_names):
            raise ValueError(
                f"Expected {len(self.rho_names)} regularization values, got {rho.shape[0]}"
            )
        if self.rows and epoch <= self.rows[-1]["epoch"]:
            raise ValueError(
                f"Epochs must increase: epoch {epoch} follows {self.rows[-1]['epoch']}"
            )
        row = {
            "epoch": int(epoch),
            "train_loss": float(train_loss),
            "reg_loss": float(reg_loss),
            "test_metric": float(test_metric),
            "gen_gap": float(gen_gap),
        }
        row.update({f"rho_{i}": float(v) for i, v in enumerate(rho)})
        row.update({name: float(v) for name, v in extras.items()})
        self.rows.append(row)

    def abort(self, reason: str):
        self.status = STATUS_ABORTED
        self.message = reason

    def finish(self):
        self.wall_time = time.perf_counter() - self._started
        return self

    @property
    def completed(self) -> bool:
        return self.status == STATUS_COMPLETED

    @property
    def final(self) -> Dict[str, float]:
        return self.rows[-1] if self.rows else {}

    def rho_trace(self) -> np.ndarray:
        """(epochs, k) array of the regularization snapshots."""
        names = [f"rho_{i}" for i in range(len(self.rho_names))]
        return np.array([[row[n] for n in names] for row in self.rows]).reshape(-1, len(names))

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows])

    def to_frame(self) -> pd.DataFrame:
        rho_columns = [f"rho_{i}" for i in range(len(self.rho_names))]
        extra_columns = []
        for row in self.rows:
            for name in row:
                if name not in BASE_COLUMNS and name not in rho_columns and name not in extra_columns:
                    extra_columns.append(name)
        return pd.DataFrame(self.rows, columns=BASE_COLUMNS + rho_columns + extra_columns)

    def meta(self) -> Dict[str, Any]:
        return {
            "regularizer": self.regularizer,
            "rho_names": self.rho_names,
            "seed": self.seed,
            "status": self.status,
            "message": self.message,
            "warnings": self.warnings,
            "rng_algorithm": self.rng_algorithm,
            "isolation": self.isolation,
            "counters": self.counters,
            "config": self.config,
        }

    def to_csv_text(self, header: str = "") -> str:
        """CSV trace; a non-empty header becomes a leading '# ' comment line."""
        body = self.to_frame().to_csv(index=False, float_format="%.17g", lineterminator="\n")
        return (f"# {header}\n" if header else "") + body

    def to_json_text(self, **extra: Any) -> str:
        payload = {**extra, **self.meta(), "rows": self.rows}
        return json.dumps(payload, indent=1, default=_json_default)


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Cannot serialize {type(value).__name__}")


# ---------------------------------------------------------------------------
# Data isolation
# ---------------------------------------------------------------------------

PHASES = ("theta", "rho", "eval")


class IsolationMonitor:
    """
    Counts partition reads by training phase.

    A cross read is a training-partition read during a rho-update or a
    regularization-partition read during a theta-update.
    """

    def __init__(self):
        self.phase = "eval"
        self.reads: Counter = Counter()

    @contextmanager
    def in_phase(self, phase: str):
        if phase not in PHASES:
            raise ValueError(f"Unknown phase '{phase}', expected one of {PHASES}")
        previous, self.phase = self.phase, phase
        try:
            yield self
        finally:
            self.phase = previous

    def record(self, partition: str):
        self.reads[(partition, self.phase)] += 1

    @property
    def cross_reads(self) -> int:
        return self.reads[("train", "rho")] + self.reads[("reg", "theta")]

    def to_dict(self) -> Dict[str, int]:
        counts = {f"{part}_{phase}": n for (part, phase), n in sorted(self.reads.items())}
        counts["cross_reads"] = self.cross_reads
        return counts


class GuardedPartition:
    """Read-counting view of one partition."""

    def __init__(self, name: str, data: Dataset, monitor: IsolationMonitor):
        self.name = name
        self._data = data
        self._monitor = monitor

    def __len__(self):
        return len(self._data)

    @property
    def task(self) -> str:
        return self._data.task

    @property
    def n_classes(self) -> Optional[int]:
        return self._data.n_classes

    def rows(self, index=None):
        """(X, y) for the selected rows (all rows when index is None)."""
        self._monitor.record(self.name)
        if index is None:
            return self._data.X, self._data.y
        return self._data.X[index], self._data.y[index]


class GuardedSplit:
    def __init__(self, data: SplitDataset, monitor: IsolationMonitor):
        self.train = GuardedPartition("train", data.train, monitor)
        self.reg = GuardedPartition("reg", data.reg, monitor)
        self.test = GuardedPartition("test", data.test, monitor)
        self.monitor = monitor
