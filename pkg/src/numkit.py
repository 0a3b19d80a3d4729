"""
Numeric Kit Module
Deterministic numeric substrate shared by every other module: seeded random
streams, Gaussian/uniform sampling, SPD linear solves, and the central
finite-difference gradient oracle used by all gradient checks.

All arrays are float64. The random generator is numpy's PCG64 everywhere in
the repo, so an (algorithm, seed) pair fully identifies a draw sequence.
"""

from typing import Callable, Dict, Iterable, List

import numpy as np
from scipy.linalg import cho_solve
from scipy.linalg.lapack import dpotrf

RNG_ALGORITHM = "PCG64"

# Relative step for central differences: h_i = FD_STEP * (1 + |x_i|)
FD_STEP = 1e-5

# Symmetry tolerance for solve_spd, relative to the largest entry
SYMMETRY_TOL = 1e-12


class DecompositionError(np.linalg.LinAlgError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot: int, size: int):
        self.pivot = pivot
        super().__init__(
            f"Cholesky decomposition failed: pivot {pivot} of a {size}x{size} "
            "matrix is not positive, so the matrix is not symmetric positive definite."
        )


def make_rng(seed: int) -> np.random.Generator:
    """Create the repo-wide generator (PCG64) for a seed."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def child_seeds(root_seed: int, n: int) -> List[int]:
    """
    Derive n independent child seeds from a root seed.

    Uses numpy's SeedSequence spawning, which hashes the root entropy with
    the child's spawn key, and takes the first 64-bit word of each child.
    """
    children = np.random.SeedSequence(int(root_seed)).spawn(n)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in children]


def spawn_rngs(seed: int, names: Iterable[str]) -> Dict[str, np.random.Generator]:
    """One independent named generator per stream, derived from a single seed."""
    names = list(names)
    return {name: make_rng(s) for name, s in zip(names, child_seeds(seed, len(names)))}


def gauss(rng: np.random.Generator, n, sigma: float = 1.0) -> np.ndarray:
    """
    Draw i.i.d. N(0, sigma^2) samples.

    The stream always advances by the same amount regardless of sigma, so
    sigma = 0 gives zeros without shifting later draws.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    return rng.standard_normal(n) * float(sigma)


def uniform(rng: np.random.Generator, n, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Draw i.i.d. U[low, high) samples."""
    if high < low:
        raise ValueError(f"uniform range is empty: low={low}, high={high}")
    return rng.uniform(low, high, size=n)


def solve_spd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Solve A x = b for a symmetric positive definite A by Cholesky.

    Parameters
    ----------
    A : ndarray, shape (n, n)
        Symmetric positive definite matrix.
    b : ndarray, shape (n,) or (n, k)
        Right-hand side.

    Returns
    -------
    ndarray
        Solution with the same shape as b.

    Raises
    ------
    ValueError
        When shapes do not match or A is not symmetric.
    DecompositionError
        When a Cholesky pivot is not positive; the error names the pivot index.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"solve_spd needs a square matrix, got shape {A.shape}")
    if b.shape[0] != A.shape[0]:
        raise ValueError(
            f"Right-hand side has {b.shape[0]} rows but the matrix is {A.shape[0]}x{A.shape[1]}"
        )
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if np.max(np.abs(A - A.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise ValueError("solve_spd needs a symmetric matrix")

    factor, info = dpotrf(A, lower=True, clean=True)
    if info > 0:
        # LAPACK reports the 1-based order of the failing leading minor
        raise DecompositionError(pivot=info - 1, size=A.shape[0])
    if info < 0:
        raise ValueError(f"Invalid argument {-info} passed to the Cholesky routine")
    return cho_solve((factor, True), b)


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    Component i is (f(x + h_i e_i) - f(x - h_i e_i)) / (2 h_i) with the
    per-coordinate step h_i = h * (1 + |x_i|). Works on arrays of any shape;
    the returned gradient has the shape of x.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        step = h * (1.0 + abs(original))
        flat_x[i] = original + step
        f_plus = float(f(x))
        flat_x[i] = original - step
        f_minus = float(f(x))
        flat_x[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(
                f"Function is not finite around coordinate {i} (f+={f_plus}, f-={f_minus})"
            )
        flat_grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def rel_err(a, b) -> float:
    """Relative error ||a - b|| / max(||a||, ||b||, tiny)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def check_finite(array, what: str) -> None:
    """Raise FloatingPointError when an array holds NaN or infinity."""
    if not np.all(np.isfinite(array)):
        raise FloatingPointError(f"{what} contains non-finite values")
