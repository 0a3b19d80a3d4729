"""
Metrics Module
Evaluation metrics (MSE, accuracy, negative log-likelihood, generalization
gap), expected calibration error with reliability bins, and the sample-size
sweep that measures how fast a learned noise scale approaches its
population value.
"""

from dataclasses import dataclass
from typing import List, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .models import gaussian_nll_terms
from .numkit import child_seeds, gauss, make_rng

N_BINS = 15
ROW_SUM_TOL = 1e-6

STAT_RATE_SIZES = (8, 16, 32, 64, 128, 256, 512)
STAT_RATE_REPEATS = 200
MIN_REPEATS = 30

# Population of the rate study: y = W_STAR x + SIGMA_STAR * noise at x = 1
W_STAR = 1.0
SIGMA_STAR = 2.0


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    return float(np.mean((pred - np.asarray(target, dtype=np.float64)) ** 2))


def accuracy(probabilities, labels) -> float:
    return float(np.mean(np.argmax(probabilities, axis=1) == np.asarray(labels)))


def nll(probabilities, labels) -> float:
    """Mean negative log-probability of the true class."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    picked = probabilities[np.arange(probabilities.shape[0]), np.asarray(labels)]
    return float(-np.mean(np.log(np.clip(picked, 1e-300, None))))


def gen_gap(train_metric: float, test_metric: float, kind: str = "accuracy") -> float:
    """
    Generalization gap, positive when the model overfits.

    kind="accuracy": train - test. kind="loss": test - train.
    """
    if kind == "accuracy":
        return float(train_metric - test_metric)
    if kind == "loss":
        return float(test_metric - train_metric)
    raise ValueError(f"kind must be 'accuracy' or 'loss', got '{kind}'")


class CalibrationBin(NamedTuple):
    low: float
    high: float
    mean_conf: float
    accuracy: float
    count: int


@dataclass
class CalibrationReport:
    bins: List[CalibrationBin]
    ece: float

    @property
    def n(self) -> int:
        return sum(b.count for b in self.bins)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [tuple(b) for b in self.bins],
            columns=["bin_low", "bin_high", "mean_conf", "accuracy", "count"],
        )

    def to_csv_text(self, header: str = "") -> str:
        """Reliability table followed by a final 'ece,<value>' row."""
        body = self.to_frame().to_csv(index=False, float_format="%.17g", lineterminator="\n")
        return (f"# {header}\n" if header else "") + body + f"ece,{self.ece:.17g}\n"


def ece(probabilities, labels, n_bins: int = N_BINS) -> CalibrationReport:
    """
    Expected calibration error over equal-width bins of the top-class
    confidence.

    Confidence c falls in bin ceil(c * n_bins) - 1 (so bins are (low, high],
    with c = 0 in the first bin). ece = sum over bins of
    (count / n) * |accuracy - mean confidence|.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probabilities.ndim != 2 or probabilities.shape[0] == 0:
        raise ValueError("ece needs a non-empty (n, classes) probability array")
    if labels.shape[0] != probabilities.shape[0]:
        raise ValueError(
            f"Got {labels.shape[0]} labels for {probabilities.shape[0]} probability rows"
        )
    if np.max(np.abs(probabilities.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
        raise ValueError("Probability rows must sum to 1")

    confidence = probabilities.max(axis=1)
    correct = (probabilities.argmax(axis=1) == labels).astype(np.float64)
    index = np.clip(np.ceil(confidence * n_bins).astype(np.int64) - 1, 0, n_bins - 1)

    n = confidence.shape[0]
    counts = np.bincount(index, minlength=n_bins)
    conf_sums = np.bincount(index, weights=confidence, minlength=n_bins)
    correct_sums = np.bincount(index, weights=correct, minlength=n_bins)
    bins = []
    total = 0.0
    for b in range(n_bins):
        count = int(counts[b])
        if count:
            mean_conf = conf_sums[b] / count
            acc = correct_sums[b] / count
            total += count / n * abs(acc - mean_conf)
        else:
            mean_conf = acc = float("nan")
        bins.append(CalibrationBin(b / n_bins, (b + 1) / n_bins, float(mean_conf), float(acc), count))
    return CalibrationReport(bins, float(total))


# ---------------------------------------------------------------------------
# Statistical rate of the learned noise scale
# ---------------------------------------------------------------------------

@dataclass
class RateFit:
    sizes: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float

    @property
    def violations(self) -> int:
        """Number of sizes at which the error went up instead of down."""
        return int(np.sum(np.diff(self.errors) > 0))


def fit_rate(sizes: Sequence[int], errors: Sequence[float]) -> RateFit:
    """Least-squares line through (log m, log error)."""
    sizes = np.asarray(sizes, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if sizes.size < 2:
        raise ValueError("A rate fit needs at least two sample sizes")
    if np.any(np.diff(sizes) <= 0):
        raise ValueError("Sample sizes must be strictly increasing")
    if np.any(~(errors > 0)):
        raise ValueError("Errors must be positive for a log-log fit")
    slope, intercept = np.polyfit(np.log(sizes), np.log(errors), 1)
    return RateFit(sizes, errors, float(slope), float(intercept))


def _learned_sigmas(noise: np.ndarray, steps: int, lr_w: float, lr_sigma: float) -> np.ndarray:
    """
    Alternate w on the noiseless pair (1, W_STAR) with log sigma on each row's
    regularization set; every row is an independent repeat.
    """
    y_reg = W_STAR + SIGMA_STAR * noise
    repeats = noise.shape[0]
    x_train, y_train = np.ones((repeats, 1)), np.full((repeats, 1), W_STAR)
    x_reg = np.ones_like(y_reg)
    w = np.zeros(repeats)
    log_sigma = np.zeros(repeats)
    for _ in range(steps):
        w = w - lr_w * gaussian_nll_terms(w, log_sigma, x_train, y_train).grad_w
        reg_fit = gaussian_nll_terms(w, log_sigma, x_reg, y_reg)
        log_sigma = log_sigma - lr_sigma * reg_fit.grad_log_sigma
    return np.exp(log_sigma)


def stat_rate_sweep(sizes: Sequence[int] = STAT_RATE_SIZES, repeats: int = STAT_RATE_REPEATS,
                    seed: int = 0, steps: int = 1000, lr_w: float = 0.1,
                    lr_sigma: float = 0.25) -> RateFit:
    """
    Mean squared error of the learned sigma against SIGMA_STAR for
    regularization sets of each size, and its log-log slope.

    Each size gets its own child seed; a larger repeat count extends the
    same draws, so runs with different repeat counts share their first rows.
    """
    if repeats < MIN_REPEATS:
        raise ValueError(f"repeats must be at least {MIN_REPEATS}, got {repeats}")
    sizes = [int(m) for m in sizes]
    if len(sizes) < 2:
        raise ValueError("stat_rate_sweep needs at least two sample sizes to fit a rate")
    errors = []
    for m, size_seed in zip(sizes, child_seeds(seed, len(sizes))):
        noise = gauss(make_rng(size_seed), (repeats, m))
        sigmas = _learned_sigmas(noise, steps, lr_w, lr_sigma)
        errors.append(float(np.mean((sigmas - SIGMA_STAR) ** 2)))
    return fit_rate(sizes, errors)
