"""
Experiments - Shared Helpers
Run logging, atomic artifact writes, config hashing, run folders and the
bounded worker pool used by multi-seed runs and sweeps.

Every artifact of a run carries the config hash and the seed: CSV files as a
leading comment line, JSON files as keys.
"""

import hashlib
import json
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional

import yaml

from ..numkit import child_seeds

WORKERS_ENV = "XREG_WORKERS"
DEFAULT_MAX_WORKERS = 4

LOG_NAME = "run_log.txt"
SUMMARY_NAME = "summary.json"
SEEDS_NAME = "seeds_summary.json"
CONFIG_NAME = "config.yaml"

# Fields that do not change a run's results
HASH_EXCLUDE = {"seed": True, "n_seeds": True, "out_dir": True, "format": True, "train": {"seed"}}
HASH_LENGTH = 16


class RunLogger:
    """
    Log of one experiment seed, mirrored to the console.

    Each line is tagged with the run and the phase it was written in:

        [2026-10-18 09:12:03] [+   4.2s] [l2 seed=3 train] Training loss ...

    Phases are "setup", "train", "artifacts" and "checks"; a sweep run adds
    its sweep point to the tag.
    """

    def __init__(self, log_path, experiment: str, seed: int,
                 sweep_point: Optional[str] = None, echo: bool = True):
        self.log_path = Path(log_path)
        self.start_time = time.perf_counter()
        self.echo = echo
        self.tag = f"{experiment} seed={seed}" + (f" {sweep_point}" if sweep_point else "")
        self.phase = "setup"

    @contextmanager
    def in_phase(self, phase: str):
        previous, self.phase = self.phase, phase
        try:
            yield self
        finally:
            self.phase = previous

    def format_line(self, message: str, elapsed: float, now: datetime) -> str:
        stamp = now.strftime("%Y-%m-%d %H:%M:%S")
        return f"[{stamp}] [+{elapsed:7.1f}s] [{self.tag} {self.phase}] {message}"

    def log(self, message):
        line = self.format_line(str(message), time.perf_counter() - self.start_time, datetime.now())
        if self.echo:
            print(line)
        try:
            with open(self.log_path, "a", encoding="utf-8") as log_file:
                log_file.write(line + "\n")
        except OSError:
            pass


def max_workers() -> int:
    """Worker bound from XREG_WORKERS, else min(4, cpu count)."""
    value = os.environ.get(WORKERS_ENV)
    if value is not None and value.strip():
        try:
            workers = int(value)
        except ValueError:
            raise ValueError(f"{WORKERS_ENV} must be a positive integer, got '{value}'") from None
        if workers < 1:
            raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {workers}")
        return workers
    return min(DEFAULT_MAX_WORKERS, os.cpu_count() or 1)


def run_seeds(seed: int, n_seeds: int) -> List[int]:
    """The root seed alone, or n child seeds derived from it."""
    return [int(seed)] if n_seeds == 1 else child_seeds(seed, n_seeds)


def config_hash(cfg) -> str:
    """Hash of the config without seed, seed count, output folder and format."""
    payload = cfg.model_dump(exclude=HASH_EXCLUDE)
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:HASH_LENGTH]


def artifact_header(cfg_hash: str, seed: int) -> str:
    return f"config_hash={cfg_hash} seed={seed}"


def write_atomic(path, text: str) -> Path:
    """Write text through a temporary file in the same folder, then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def write_json(path, payload: Dict[str, Any]) -> Path:
    return write_atomic(path, json.dumps(payload, indent=1, default=_json_default) + "\n")


def _plain(value):
    if isinstance(value, dict):
        return {key: _plain(v) for key, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def write_config(path, cfg) -> Path:
    return write_atomic(path, yaml.safe_dump(_plain(cfg.model_dump()), sort_keys=False))


def _json_default(value):
    if hasattr(value, "item"):
        return value.item()
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


def run_folder(out_dir, experiment: str, seed: int, sweep_point: Optional[str] = None) -> Path:
    """<out>/<experiment>/seed_<seed>, or <out>/sweep_<param>/<value>/seed_<seed> for sweeps."""
    base = Path(out_dir)
    if sweep_point is not None:
        return base / sweep_point / f"seed_{seed}"
    return base / experiment / f"seed_{seed}"


def run_jobs(function: Callable, jobs: Iterable, workers: int,
             progress_callback: Optional[Callable[[float, str], None]] = None) -> List[Any]:
    """
    Run function over jobs on a process pool of at most `workers` processes.

    Results come back in job order. A single worker runs in-process.
    """
    jobs = list(jobs)
    total = len(jobs)
    results = []
    if workers <= 1 or total <= 1:
        for done, job in enumerate(jobs, start=1):
            results.append(function(job))
            if progress_callback is not None:
                progress_callback(done / total, f"Run {done} of {total} finished")
        return results
    with ProcessPoolExecutor(max_workers=min(workers, total)) as pool:
        for done, result in enumerate(pool.map(function, jobs), start=1):
            results.append(result)
            if progress_callback is not None:
                progress_callback(done / total, f"Run {done} of {total} finished")
    return results
