"""
Data Generation Module
Synthetic datasets for the cross-regularization experiments, CSV ingestion
for real tabular data, and deterministic train / regularization / test
splitting.

Every generator is a pure function of its parameters and the generator
passed in, so a seed reproduces a dataset exactly.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .numkit import gauss, uniform

# Target noise for the correlated-features problem (scale of N(0, 1))
CORRELATED_TARGET_NOISE = 0.5

# Spline problem: heteroskedastic noise scale and the sampling gap
SPLINE_NOISE_SCALE = 0.3
SPLINE_GAP = (0.55, 0.7)

FRACTION_TOL = 1e-9


class DatasetError(ValueError):
    """A dataset could not be read or does not have the expected columns."""


@dataclass
class Dataset:
    """Inputs, targets and task type; meta holds generator diagnostics."""

    X: np.ndarray
    y: np.ndarray
    task: str = "regression"
    n_classes: Optional[int] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.task == "classification":
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.n_classes is None:
                self.n_classes = int(self.y.max()) + 1 if self.y.size else 0
            if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
                raise ValueError(f"Class labels must lie in [0, {self.n_classes})")
        elif self.task == "regression":
            self.y = np.asarray(self.y, dtype=np.float64)
        else:
            raise ValueError(f"Unknown task '{self.task}', expected regression or classification")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(
                f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]} entries"
            )

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def take(self, index: np.ndarray) -> "Dataset":
        """Row subset sharing the task description."""
        return Dataset(self.X[index], self.y[index], self.task, self.n_classes, dict(self.meta))


@dataclass
class SplitDataset:
    """Disjoint train / regularization / test partitions."""

    train: Dataset
    reg: Dataset
    test: Dataset
    fractions: Tuple[float, float, float]
    indices: Optional[Dict[str, np.ndarray]] = None


def gen_correlated(n_base: int = 5, n_total: int = 100, noise_sd: float = 0.1,
                   n_samples: int = 200, rng: np.random.Generator = None) -> Dataset:
    """
    Groups of highly correlated features over a few independent base features.

    Column j copies base feature j mod n_base; columns past the first n_base
    get N(0, noise_sd^2) added. Within each group the true coefficients
    alternate +1 / -1, so an unregularized fit can trade large opposing
    weights on near-duplicate columns. Targets are X w_true + 0.5 N(0, 1).

    Parameters
    ----------
    n_base : int
        Number of independent standard-normal base features.
    n_total : int
        Total number of columns, at least n_base.
    noise_sd : float
        Standard deviation of the noise added to copied columns.
    n_samples : int
        Number of rows.
    rng : numpy Generator
        Source of all randomness.

    Returns
    -------
    Dataset with meta['w_true'] and meta['groups'].
    """
    if n_base < 1:
        raise ValueError(f"n_base must be at least 1, got {n_base}")
    if n_total < n_base:
        raise ValueError(f"n_total ({n_total}) must be at least n_base ({n_base})")
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be non-negative, got {noise_sd}")

    base = gauss(rng, (n_samples, n_base))
    groups = np.arange(n_total) % n_base
    X = base[:, groups]
    copy_noise = gauss(rng, (n_samples, n_total - n_base), noise_sd)
    X[:, n_base:] += copy_noise

    member = np.arange(n_total) // n_base
    w_true = np.where(member % 2 == 0, 1.0, -1.0)
    y = X @ w_true + CORRELATED_TARGET_NOISE * gauss(rng, n_samples)
    return Dataset(X, y, "regression", meta={
        "source": "correlated",
        "w_true": w_true,
        "groups": groups,
    })


def spline_mean(x) -> np.ndarray:
    """Noiseless spline target sin(2 pi x) + 0.5 sin(8 pi x)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sin(2 * np.pi * x) + 0.5 * np.sin(8 * np.pi * x)


def gen_spline(n_points: int = 20, rng: np.random.Generator = None) -> Dataset:
    """
    Heteroskedastic samples of the spline target on [0, 1] with a gap.

    x is uniform on [0, 1] minus the gap, so no sample falls in
    SPLINE_GAP. The noise standard deviation grows as (0.5 + x) * 0.3.
    """
    if n_points < 4:
        raise ValueError(f"n_points must be at least 4, got {n_points}")
    lo, hi = SPLINE_GAP
    width = 1.0 - (hi - lo)
    # Sample the gap-free length, then open the gap
    raw = uniform(rng, n_points, 0.0, width)
    x = np.where(raw < lo, raw, raw + (hi - lo))
    x = np.sort(x)
    noise = gauss(rng, n_points) * (0.5 + x) * SPLINE_NOISE_SCALE
    y = spline_mean(x) + noise
    return Dataset(x[:, None], y, "regression", meta={"source": "spline", "gap": SPLINE_GAP})


def blob_centers(n_classes: int, sep: float) -> np.ndarray:
    """Class centers evenly spaced on a circle of radius sep."""
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    return sep * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gen_blobs(n_classes: int = 4, n_samples: int = 4000, sep: float = 3.0,
              label_noise: float = 0.0, rng: np.random.Generator = None) -> Dataset:
    """
    Unit-variance Gaussian clusters in 2-D with uniform label noise.

    A fraction label_noise of the labels is resampled uniformly over all
    classes, so the accuracy ceiling is about 1 - label_noise * (1 - 1/C).
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be at least 2, got {n_classes}")
    if not 0 <= label_noise < 1:
        raise ValueError(f"label_noise must lie in [0, 1), got {label_noise}")
    centers = blob_centers(n_classes, sep)
    clean = rng.integers(0, n_classes, size=n_samples)
    X = centers[clean] + gauss(rng, (n_samples, 2))
    flip = rng.random(n_samples) < label_noise
    resampled = rng.integers(0, n_classes, size=n_samples)
    y = np.where(flip, resampled, clean)
    return Dataset(X, y, "classification", n_classes, meta={
        "source": "blobs",
        "centers": centers,
        "clean_labels": clean,
    })


def gen_shift_patterns(n_classes: int = 4, n_samples: int = 600, length: int = 16,
                       max_shift: int = 3, noise_sd: float = 0.3,
                       rng: np.random.Generator = None) -> Dataset:
    """
    Shift-invariant 1-D classification task.

    Each class owns a smooth random template; a sample is its class template
    circularly shifted by an integer offset in [-max_shift, max_shift] plus
    N(0, noise_sd^2) noise. Labels do not depend on the shift.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be at least 2, got {n_classes}")
    if length < 2:
        raise ValueError(f"length must be at least 2, got {length}")
    raw = gauss(rng, (n_classes, length))
    # Circular smoothing keeps templates distinguishable but locally correlated
    templates = (raw + np.roll(raw, 1, axis=1) + np.roll(raw, -1, axis=1)) / np.sqrt(3.0)
    labels = rng.integers(0, n_classes, size=n_samples)
    shifts = rng.integers(-max_shift, max_shift + 1, size=n_samples)
    cols = (np.arange(length)[None, :] - shifts[:, None]) % length
    X = templates[labels][np.arange(n_samples)[:, None], cols]
    X = X + gauss(rng, (n_samples, length), noise_sd)
    return Dataset(X, labels, "classification", n_classes, meta={
        "source": "shift_patterns",
        "templates": templates,
        "shifts": shifts,
    })


def _standardize(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (values - mean) / std, mean, std


def load_csv(path, target_column: str, standardize: bool = False,
             standardize_target: bool = False) -> Dataset:
    """
    Load a numeric CSV file with a header row into a regression Dataset.

    Parameters
    ----------
    path : str or Path
        UTF-8, comma-separated file with a header row.
    target_column : str
        Column holding the regression target.
    standardize : bool
        Scale every feature column to zero mean and unit variance.
    standardize_target : bool
        Scale the target the same way.

    Returns
    -------
    Dataset with meta['feature_names'] and, when standardized, the
    mean/std constants that were applied.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Data file not found: {path}")
    frame = pd.read_csv(path, encoding="utf-8", dtype=str, skipinitialspace=True)
    if target_column not in frame.columns:
        raise DatasetError(
            f"Target column '{target_column}' is not in {path.name}; "
            f"available columns: {', '.join(frame.columns)}"
        )
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna() & frame.notna() | frame.isna()
    if bad.values.any():
        row, col = np.argwhere(bad.values)[0]
        # +2: one for the header line, one for 1-based numbering
        raise DatasetError(
            f"Non-numeric cell in {path.name} at line {row + 2}, column "
            f"'{frame.columns[col]}': {frame.iat[row, col]!r}"
        )

    feature_names = [c for c in numeric.columns if c != target_column]
    X = numeric[feature_names].to_numpy(dtype=np.float64)
    y = numeric[target_column].to_numpy(dtype=np.float64)
    meta = {"source": str(path), "feature_names": feature_names}
    if standardize:
        X, meta["feature_mean"], meta["feature_std"] = _standardize(X)
    if standardize_target:
        y, meta["target_mean"], meta["target_std"] = _standardize(y)
    return Dataset(X, y, "regression", meta=meta)


def load_diabetes(standardize: bool = True, standardize_target: bool = True) -> Dataset:
    """
    The 442 x 10 diabetes progression table bundled with scikit-learn.

    The raw (unscaled) table is loaded and standardized here, so the result
    matches load_csv on an exported copy of the same data.
    """
    from sklearn.datasets import load_diabetes as sk_load_diabetes

    bunch = sk_load_diabetes(scaled=False)
    X = np.asarray(bunch.data, dtype=np.float64)
    y = np.asarray(bunch.target, dtype=np.float64)
    meta = {"source": "sklearn.diabetes", "feature_names": list(bunch.feature_names)}
    if standardize:
        X, meta["feature_mean"], meta["feature_std"] = _standardize(X)
    if standardize_target:
        y, meta["target_mean"], meta["target_std"] = _standardize(y)
    return Dataset(X, y, "regression", meta=meta)


def partition_sizes(n: int, fractions: Sequence[float]) -> Tuple[int, int, int]:
    """Train / reg / test sizes for n rows; test takes the rounding remainder."""
    n_train = int(round(fractions[0] * n))
    n_reg = int(round(fractions[1] * n))
    n_test = n - n_train - n_reg
    return n_train, n_reg, n_test


def split(ds: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1),
          rng: np.random.Generator = None) -> SplitDataset:
    """
    Random permutation, then contiguous train / reg / test slices.

    Raises ValueError when fractions are not positive, do not sum to one, or
    leave any partition empty.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be three positive ratios, got {fractions}")
    if abs(sum(fractions) - 1.0) > FRACTION_TOL:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    n = len(ds)
    n_train, n_reg, n_test = partition_sizes(n, fractions)
    if min(n_train, n_reg, n_test) < 1:
        raise ValueError(
            f"Splitting {n} rows by {fractions} leaves an empty partition "
            f"({n_train}/{n_reg}/{n_test})"
        )
    order = rng.permutation(n)
    index = {
        "train": order[:n_train],
        "reg": order[n_train:n_train + n_reg],
        "test": order[n_train + n_reg:],
    }
    return SplitDataset(
        train=ds.take(index["train"]),
        reg=ds.take(index["reg"]),
        test=ds.take(index["test"]),
        fractions=fractions,
        indices=index,
    )


def subsample_train(data: SplitDataset, fraction: float, rng: np.random.Generator) -> SplitDataset:
    """Keep a random fraction of the train partition; reg and test are shared."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n_keep = max(1, int(round(fraction * len(data.train))))
    keep = np.sort(rng.permutation(len(data.train))[:n_keep])
    indices = dict(data.indices) if data.indices is not None else None
    if indices is not None:
        indices["train"] = indices["train"][keep]
    return replace(data, train=data.train.take(keep), indices=indices)
