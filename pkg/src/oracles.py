"""
Oracles Module
Independent ground-truth solvers for the linear experiments: closed-form
ridge, coordinate-descent LASSO and the penalized B-spline, each swept over
a grid of penalty weights and scored on the regularization partition.

Objectives:
    ridge   ||X w - y||^2 + lambda ||w||^2
    lasso   (1 / 2n) ||X w - y||^2 + lambda ||w||_1
    spline  ||B beta - y||^2 + lambda ||D beta||^2
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

from .datagen import SplitDataset
from .models import SPLINE_DEGREE, SPLINE_KNOTS, bspline_design, second_diff_matrix
from .numkit import solve_spd

RIDGE_GRID = (1e-3, 1e1, 1000)
LASSO_GRID = (10 ** -2.5, 1.0, 50)
SPLINE_GRID = (1e-6, 1e2, 60)

LASSO_TOL = 1e-8
LASSO_MAX_ITER = 100_000

MAX_WORKERS = 4

RIDGE_OBJECTIVE = "||Xw - y||^2 + lambda ||w||_2^2"
LASSO_OBJECTIVE = "(1/(2n)) ||Xw - y||^2 + lambda ||w||_1"
SPLINE_OBJECTIVE = "||B beta - y||^2 + lambda ||D beta||^2"


def log_grid(low: float, high: float, count: int) -> np.ndarray:
    return np.logspace(np.log10(low), np.log10(high), count)


@dataclass
class GridResult:
    """Validation losses over a penalty grid and the best solution."""

    lambdas: np.ndarray
    val_losses: np.ndarray
    best_lambda: float
    best_weights: np.ndarray
    path: Optional[np.ndarray] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.val_losses))

    @property
    def best_loss(self) -> float:
        return float(self.val_losses[self.best_index])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"lambda": self.lambdas, "val_loss": self.val_losses})

    def to_csv_text(self, header: str = "") -> str:
        body = self.to_frame().to_csv(index=False, float_format="%.17g", lineterminator="\n")
        return (f"# {header}\n" if header else "") + body


def _check_grid(lambdas) -> np.ndarray:
    lambdas = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    if lambdas.size == 0:
        raise ValueError("The penalty grid is empty")
    if np.any(lambdas <= 0):
        raise ValueError("Penalty grid values must be positive")
    return lambdas


def _grid_result(lambdas, fits, X_reg, y_reg, predict, meta) -> GridResult:
    path = np.array(fits)
    val_losses = np.array([np.mean((predict(X_reg, w) - y_reg) ** 2) for w in path])
    best = int(np.argmin(val_losses))
    return GridResult(lambdas, val_losses, float(lambdas[best]), path[best].copy(), path, meta)


def _map_grid(fit: Callable[[float], np.ndarray], lambdas: np.ndarray,
              workers: Optional[int]) -> list:
    """Evaluate fit at every grid point; results come back in grid order."""
    if workers is None or workers <= 1:
        return [fit(lam) for lam in lambdas]
    with ThreadPoolExecutor(max_workers=min(workers, MAX_WORKERS)) as pool:
        return list(pool.map(fit, lambdas))


# ---------------------------------------------------------------------------
# Ridge
# ---------------------------------------------------------------------------

def ridge_solve(X, y, lam: float) -> np.ndarray:
    """w = (X^T X + lambda I)^-1 X^T y by Cholesky."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    X = np.asarray(X, dtype=np.float64)
    gram = X.T @ X
    gram[np.diag_indices_from(gram)] += lam
    return solve_spd(gram, X.T @ np.asarray(y, dtype=np.float64))


def ridge_grid(split: SplitDataset, lambdas: Optional[Sequence[float]] = None,
               workers: Optional[int] = None) -> GridResult:
    """Fit ridge on the training partition for every lambda; score MSE on the regularization partition."""
    lambdas = _check_grid(log_grid(*RIDGE_GRID) if lambdas is None else lambdas)
    X, y = split.train.X, split.train.y
    fits = _map_grid(lambda lam: ridge_solve(X, y, lam), lambdas, workers)
    return _grid_result(lambdas, fits, split.reg.X, split.reg.y,
                        lambda A, w: A @ w, {"objective": RIDGE_OBJECTIVE})


# ---------------------------------------------------------------------------
# LASSO
# ---------------------------------------------------------------------------

class LassoFit(NamedTuple):
    weights: np.ndarray
    converged: bool
    n_iter: int


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_cd(X, y, lam: float, tol: float = LASSO_TOL, max_iter: int = LASSO_MAX_ITER,
             w0: Optional[np.ndarray] = None) -> LassoFit:
    """
    Cyclic coordinate descent on (1/(2n)) ||X w - y||^2 + lambda ||w||_1.

    Stops when a full sweep changes no coordinate by tol or more. When
    max_iter sweeps are used up the last iterate is returned with
    converged=False.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    w = np.zeros(d) if w0 is None else np.array(w0, dtype=np.float64)
    col_sq = np.einsum("ij,ij->j", X, X) / n
    residual = y - X @ w

    for sweep in range(1, max_iter + 1):
        max_change = 0.0
        for j in range(d):
            if col_sq[j] == 0.0:
                continue
            old = w[j]
            rho_j = X[:, j] @ residual / n + col_sq[j] * old
            new = soft_threshold(rho_j, lam) / col_sq[j]
            if new != old:
                residual -= X[:, j] * (new - old)
                w[j] = new
                max_change = max(max_change, abs(new - old))
        if max_change < tol:
            return LassoFit(w, True, sweep)
    return LassoFit(w, False, max_iter)


def lasso_grid(split: SplitDataset, lambdas: Optional[Sequence[float]] = None,
               tol: float = LASSO_TOL, max_iter: int = LASSO_MAX_ITER) -> GridResult:
    """
    LASSO path on the training partition, scored on the regularization set.

    Solved from the largest lambda down with warm starts; results are
    reported in the order of the given grid.
    """
    lambdas = _check_grid(log_grid(*LASSO_GRID) if lambdas is None else lambdas)
    X, y = split.train.X, split.train.y
    fits = [None] * lambdas.size
    converged = True
    w = None
    for i in np.argsort(-lambdas, kind="stable"):
        fit = lasso_cd(X, y, lambdas[i], tol, max_iter, w0=w)
        converged &= fit.converged
        w = fit.weights
        fits[i] = w.copy()
    meta = {"objective": LASSO_OBJECTIVE, "converged": bool(converged)}
    return _grid_result(lambdas, fits, split.reg.X, split.reg.y, lambda A, w: A @ w, meta)


# ---------------------------------------------------------------------------
# Penalized spline
# ---------------------------------------------------------------------------

def spline_solve(B, y, D, lam: float) -> np.ndarray:
    """beta = (B^T B + lambda D^T D)^-1 B^T y."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    B = np.asarray(B, dtype=np.float64)
    return solve_spd(B.T @ B + lam * (D.T @ D), B.T @ np.asarray(y, dtype=np.float64))


def spline_grid(split: SplitDataset, knots: int = SPLINE_KNOTS,
                lambdas: Optional[Sequence[float]] = None,
                workers: Optional[int] = None) -> GridResult:
    """Penalized cubic spline on the training inputs (column 0), scored on the regularization set."""
    lambdas = _check_grid(log_grid(*SPLINE_GRID) if lambdas is None else lambdas)
    B = bspline_design(split.train.X[:, 0], knots, SPLINE_DEGREE)
    D = second_diff_matrix(B.shape[1])
    y = split.train.y
    fits = _map_grid(lambda lam: spline_solve(B, y, D, lam), lambdas, workers)

    def predict(X, beta):
        return bspline_design(X[:, 0], knots, SPLINE_DEGREE) @ beta

    return _grid_result(lambdas, fits, split.reg.X, split.reg.y, predict,
                        {"objective": SPLINE_OBJECTIVE, "knots": knots})
