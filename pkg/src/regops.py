"""
Regularization Operators Module
Gradient decomposition along characteristic complexity directions (L1 and
derivative norm), and the differentiable 1-D circular shift used as a
learnable data augmentation.

Directions that vanish (all-zero weights, coefficients in the null space of
the difference matrix) raise DegenerateDirectionError; training loops catch
it and skip the regularization step.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .numkit import uniform

# A direction with norm at or below this is treated as zero
DIRECTION_TOL = 1e-300

# D^T D beta counts as zero below this share of ||D||_F^2 ||beta||
DIRECTION_RTOL = 1e-12


class DegenerateDirectionError(ValueError):
    """The complexity direction has zero length, so nothing can be projected."""


class GradSplit(NamedTuple):
    g_rho: np.ndarray
    g_perp: np.ndarray


def _unit(u: np.ndarray, what: str) -> np.ndarray:
    norm = float(np.linalg.norm(u))
    if not norm > DIRECTION_TOL:
        raise DegenerateDirectionError(f"The {what} direction is zero; no projection is defined")
    return u / norm


def project(g, u_raw) -> GradSplit:
    """
    Split g into its component along u_raw and the orthogonal remainder.

    g_rho = u (g . u) with u = u_raw / ||u_raw||, and g_perp = g - g_rho.
    """
    g = np.asarray(g, dtype=np.float64)
    u = _unit(np.asarray(u_raw, dtype=np.float64), "projection")
    if u.shape != g.shape:
        raise ValueError(f"Gradient shape {g.shape} does not match direction shape {u.shape}")
    g_rho = u * (g @ u)
    return GradSplit(g_rho, g - g_rho)


def l1_direction(w) -> np.ndarray:
    """sign(w) / ||sign(w)||, with sign(0) = 0."""
    return _unit(np.sign(np.asarray(w, dtype=np.float64)), "L1")


def deriv_norm_direction(beta, D) -> np.ndarray:
    """D^T D beta normalized; zero when beta is constant or linear in the basis index."""
    beta = np.asarray(beta, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    u = D.T @ (D @ beta)
    # Round-off leaves ~1e-16 for coefficients in the null space of D
    if not np.linalg.norm(u) > DIRECTION_RTOL * np.linalg.norm(D) ** 2 * np.linalg.norm(beta):
        raise DegenerateDirectionError(
            "The derivative-norm direction is zero; the coefficients lie in the null space of D"
        )
    return _unit(u, "derivative-norm")


def l1_step_signs(w, g):
    """
    Sign pattern of a level-preserving L1 training step.

    Nonzero weights keep sign(w). A zero weight enters with the sign its
    gradient step would give it when |g_j| exceeds the active-set multiplier
    |g_A . sign(w_A)| / |A|; below that it cannot lower the loss at a fixed
    ||w||_1 and is frozen.

    Returns
    -------
    (signs, frozen) : the direction to project out, and the zero weights to hold at zero.
    """
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    signs = np.sign(w)
    active = signs != 0
    if not active.any():
        raise DegenerateDirectionError("The L1 direction is zero; no projection is defined")
    multiplier = abs(g[active] @ signs[active]) / active.sum()
    entering = ~active & (np.abs(g) > multiplier)
    signs[entering] = -np.sign(g[entering])
    return signs, ~active & ~entering


def clamp_sign_changes(before, after: np.ndarray) -> np.ndarray:
    """Set to zero, in place, the weights of `after` whose sign is opposite to `before`; returns that mask."""
    crossed = np.sign(np.asarray(before)) * np.sign(after) < 0
    after[crossed] = 0.0
    return crossed


def l1_regularizer_drift(w, g, eta: float) -> float:
    """
    Change of ||w||_1 after a training step of size eta along the part of g
    orthogonal to the L1 direction.
    """
    w = np.asarray(w, dtype=np.float64)
    step = project(g, l1_direction(w)).g_perp
    return float(abs(np.abs(w - eta * step).sum() - np.abs(w).sum()))


# ---------------------------------------------------------------------------
# Differentiable circular shift
# ---------------------------------------------------------------------------

def _shift_parts(x, s):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError(f"shift1d needs at least 2 samples per row, got {x.shape[-1]}")
    batch = x.ndim == 2
    s = np.asarray(s, dtype=np.float64)
    if batch:
        s = np.broadcast_to(s, (x.shape[0],))[:, None]
    whole = np.floor(s)
    frac = s - whole
    index = np.arange(x.shape[-1]) - whole.astype(np.int64)
    length = x.shape[-1]
    if batch:
        near = np.take_along_axis(x, index % length, axis=1)
        far = np.take_along_axis(x, (index - 1) % length, axis=1)
    else:
        near = x[index % length]
        far = x[(index - 1) % length]
    return near, far, frac


def shift1d(x, s) -> np.ndarray:
    """
    Circular shift by a real number of positions, linearly interpolated.

    out[i] = (1 - f) x[i - k] + f x[i - k - 1] with k = floor(s), f = s - k
    (indices mod the length). x may be one row or a batch of rows, in which
    case s is a scalar or one shift per row.
    """
    near, far, frac = _shift_parts(x, s)
    return (1.0 - frac) * near + frac * far


def shift1d_grad(x, s) -> np.ndarray:
    """d shift1d / ds; at integer s this is the right-derivative."""
    near, far, _ = _shift_parts(x, s)
    return far - near


@dataclass
class AugmentParams:
    """Learnable maximum shift, in index units."""

    alpha: float = 1.0
    alpha_max: Optional[float] = None

    def __post_init__(self):
        self.alpha = float(self.alpha)
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")

    def clamp(self):
        upper = np.inf if self.alpha_max is None else self.alpha_max
        self.alpha = float(np.clip(self.alpha, 0.0, upper))


class AugmentDraw(NamedTuple):
    x_aug: np.ndarray
    u: np.ndarray
    dx_ds: np.ndarray


def augment_sample(x, p: AugmentParams, rng: np.random.Generator) -> AugmentDraw:
    """
    Shift x by alpha * u with u ~ U[-1, 1] (one draw per row for a batch).

    The draw is kept so the gradient wrt alpha is u * d shift / ds.
    """
    x = np.asarray(x, dtype=np.float64)
    u = uniform(rng, x.shape[0] if x.ndim == 2 else None, -1.0, 1.0)
    s = p.alpha * np.asarray(u)
    return AugmentDraw(shift1d(x, s), np.asarray(u), shift1d_grad(x, s))


def alpha_grad(draw: AugmentDraw, d_x) -> float:
    """dL/dalpha from dL/dx_aug for one augmentation draw."""
    d_x = np.asarray(d_x, dtype=np.float64)
    u = draw.u[:, None] if draw.dx_ds.ndim == 2 else draw.u
    return float(np.sum(d_x * draw.dx_ds * u))
