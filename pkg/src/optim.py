"""
Optimization Module
Training configuration, the gradient-step rules (SGD, heavy-ball momentum,
Adam), convergence-rate measurement, and a coupled quadratic problem on which
the alternating scheme has a known linear rate.

Optimizers update named numpy arrays in place. Each parameter group (model
parameters, regularization parameters) owns a separate optimizer, so their
momenta never mix.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .numkit import gauss


class RegularizerSpec(str, Enum):
    """Which mechanism the regularization parameters drive."""

    L2_REPARAM = "l2_reparam"
    L1_PROJECTION = "l1_projection"
    DERIV_NORM_PROJECTION = "deriv_norm_projection"
    NOISE_SCALES = "noise_scales"
    AUGMENT_MAGNITUDE = "augment_magnitude"


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, step: int, name: str):
        self.step = step
        self.name = name
        super().__init__(f"Non-finite gradient for '{name}' at optimizer step {step}")


class TrainConfig(BaseModel):
    """Learning rates, schedule and optimizer for one cross-regularization run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lr_theta: float = Field(1e-4, gt=0)
    # 0 freezes the regularization parameters
    lr_rho: float = Field(0.1, ge=0)
    reg_interval: int = Field(30, ge=1)
    mc_samples: int = Field(3, ge=1)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(512, ge=1)
    optimizer: Literal["sgd", "momentum", "adam"] = "adam"
    momentum: float = Field(0.9, ge=0, lt=1)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    reg_start_step: int = Field(0, ge=0)
    seed: int = 0

    # Noise and augmentation
    log_sigma_init: float = -3.0
    log_sigma_max: float = 5.0
    mc_space: Literal["prob", "logit"] = "prob"
    alpha_init: float = Field(1.0, ge=0)
    alpha_max: Optional[float] = Field(None, gt=0)
    augment_at_test: bool = False

    # Linear magnitude/direction model: step theta in weight or direction units
    theta_step_scaling: Literal["weight", "direction"] = "weight"
    divergence_threshold: float = Field(1e6, gt=0)

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.log_sigma_init > self.log_sigma_max:
            raise ValueError(
                f"log_sigma_init ({self.log_sigma_init}) is above log_sigma_max ({self.log_sigma_max})"
            )
        if self.alpha_max is not None and self.alpha_init > self.alpha_max:
            raise ValueError(f"alpha_init ({self.alpha_init}) is above alpha_max ({self.alpha_max})")
        return self


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class Optimizer:
    """Base optimizer; subclasses implement update_param."""

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             lr: Optional[float] = None) -> Dict[str, np.ndarray]:
        """Apply one update to every parameter that has a gradient."""
        lr = self.lr if lr is None else lr
        self.t += 1
        for name in grads:
            if not np.all(np.isfinite(grads[name])):
                raise NonFiniteGradientError(self.t, name)
        for name, grad in grads.items():
            if params[name].shape != np.shape(grad):
                raise ValueError(
                    f"Gradient for '{name}' has shape {np.shape(grad)}, "
                    f"parameter has {params[name].shape}"
                )
            self.update_param(name, params[name], np.asarray(grad, dtype=np.float64), lr)
        return params

    def update_param(self, name: str, p: np.ndarray, grad: np.ndarray, lr: float):
        raise NotImplementedError

    def forget(self, name: str, mask: np.ndarray):
        """Drop the accumulated state of the masked entries of one parameter."""


class SGD(Optimizer):
    def update_param(self, name, p, grad, lr):
        p -= lr * grad


class SGDMomentum(Optimizer):
    """Heavy ball: v = mu * v + g, p = p - lr * v."""

    def __init__(self, lr: float, momentum: float = 0.9):
        super().__init__(lr)
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def update_param(self, name, p, grad, lr):
        v = self.velocity.get(name)
        v = grad.copy() if v is None else self.momentum * v + grad
        self.velocity[name] = v
        p -= lr * v

    def forget(self, name, mask):
        if name in self.velocity:
            self.velocity[name][mask] = 0.0


class Adam(Optimizer):
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.param_step: Dict[str, int] = {}
        self.param_momentum: Dict[str, np.ndarray] = {}
        self.param_2nd_momentum: Dict[str, np.ndarray] = {}

    def update_param(self, name, p, grad, lr):
        t = self.param_step.get(name, 0) + 1
        self.param_step[name] = t
        m = self.param_momentum.get(name, np.zeros_like(grad))
        v = self.param_2nd_momentum.get(name, np.zeros_like(grad))
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad ** 2
        self.param_momentum[name] = m
        self.param_2nd_momentum[name] = v

        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def forget(self, name, mask):
        if name in self.param_momentum:
            self.param_momentum[name][mask] = 0.0


def make_optimizer(cfg: TrainConfig, lr: float) -> Optimizer:
    if cfg.optimizer == "sgd":
        return SGD(lr)
    if cfg.optimizer == "momentum":
        return SGDMomentum(lr, cfg.momentum)
    return Adam(lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def step(optimizer: Optimizer, params, grads, lr: Optional[float] = None):
    """One update of params in place; the optimizer carries its state between calls."""
    return optimizer.step(params, grads, lr)


# ---------------------------------------------------------------------------
# Convergence measurement
# ---------------------------------------------------------------------------

MIN_TRACE = 20
CONVERGENCE_WINDOW = 0.8


def measure_convergence(trace: Sequence[float], window: float = CONVERGENCE_WINDOW) -> float:
    """
    Per-step contraction factor of an error sequence.

    Fits a least-squares line to log(error) against the step index over the
    last `window` fraction of the trace and returns exp(slope).
    """
    errors = np.asarray(trace, dtype=np.float64)
    if errors.ndim != 1 or errors.size < MIN_TRACE:
        raise ValueError(f"Need at least {MIN_TRACE} error values, got {errors.size}")
    if np.any(~(errors > 0)):
        raise ValueError("Errors must be positive to measure a convergence rate")
    if not 0 < window <= 1:
        raise ValueError(f"window must lie in (0, 1], got {window}")
    start = errors.size - int(np.ceil(window * errors.size))
    steps = np.arange(start, errors.size, dtype=np.float64)
    slope = np.polyfit(steps, np.log(errors[start:]), 1)[0]
    return float(np.exp(slope))


@dataclass
class CoupledQuadratic:
    """
    Two coupled quadratics:

        train(theta, rho) = 1/2 (theta - A rho - a)^T H (theta - A rho - a)
        reg(theta, rho)   = 1/2 (rho - B theta - b)^T G (rho - B theta - b)

    train is mu-strongly convex in theta, reg is alpha-strongly convex in rho,
    both are beta-smooth. The joint fixed point solves
    (I - B A) rho = B a + b, theta = A rho + a.
    """

    H: np.ndarray
    G: np.ndarray
    A: np.ndarray
    B: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @classmethod
    def random(cls, dim_theta: int, dim_rho: int, rng: np.random.Generator,
               mu: float = 1.0, alpha: float = 1.0, beta: float = 4.0,
               coupling: float = 0.1) -> "CoupledQuadratic":
        """Random instance whose Hessian spectra span exactly [mu, beta] and [alpha, beta]."""
        def spd(dim, low):
            q, _ = np.linalg.qr(gauss(rng, (dim, dim)))
            eig = np.linspace(low, beta, dim) if dim > 1 else np.array([low])
            return (q * eig) @ q.T

        def scaled(rows, cols):
            m = gauss(rng, (rows, cols))
            return m * (np.sqrt(coupling) / np.linalg.norm(m, 2))

        return cls(
            H=spd(dim_theta, mu),
            G=spd(dim_rho, alpha),
            A=scaled(dim_theta, dim_rho),
            B=scaled(dim_rho, dim_theta),
            a=gauss(rng, dim_theta),
            b=gauss(rng, dim_rho),
        )

    @property
    def mu(self) -> float:
        return float(np.linalg.eigvalsh(self.H)[0])

    @property
    def alpha(self) -> float:
        return float(np.linalg.eigvalsh(self.G)[0])

    @property
    def beta(self) -> float:
        return float(max(np.linalg.eigvalsh(self.H)[-1], np.linalg.eigvalsh(self.G)[-1]))

    def fixed_point(self):
        dim_rho = self.G.shape[0]
        rho = np.linalg.solve(np.eye(dim_rho) - self.B @ self.A, self.B @ self.a + self.b)
        return self.A @ rho + self.a, rho

    def grad_theta(self, theta, rho):
        return self.H @ (theta - self.A @ rho - self.a)

    def grad_rho(self, theta, rho):
        return self.G @ (rho - self.B @ theta - self.b)

    def step_sizes(self):
        """Largest rates with eta_theta <= 1/beta and eta_rho <= min(1/beta, mu eta_theta / (4 beta^2)), and the rate kappa."""
        mu, alpha, beta = self.mu, self.alpha, self.beta
        eta_theta = 1.0 / beta
        eta_rho = min(1.0 / beta, mu * eta_theta / (4.0 * beta ** 2))
        kappa = min(mu * eta_theta / 2.0, alpha * eta_rho)
        return eta_theta, eta_rho, kappa


def alternate_quadratic(problem: CoupledQuadratic, steps: int, rng: np.random.Generator,
                        eta_theta: Optional[float] = None,
                        eta_rho: Optional[float] = None) -> np.ndarray:
    """
    Run the alternating updates on a coupled quadratic from a random start.

    The rho-update at step t uses theta_{t+1}. Returns the squared distance
    to the fixed point, ||theta - theta*||^2 + ||rho - rho*||^2, before each
    step and after the last.
    """
    default_theta, default_rho, _ = problem.step_sizes()
    eta_theta = default_theta if eta_theta is None else eta_theta
    eta_rho = default_rho if eta_rho is None else eta_rho
    theta_star, rho_star = problem.fixed_point()
    theta = theta_star + gauss(rng, theta_star.shape)
    rho = rho_star + gauss(rng, rho_star.shape)

    errors = np.empty(steps + 1)
    for t in range(steps):
        errors[t] = np.sum((theta - theta_star) ** 2) + np.sum((rho - rho_star) ** 2)
        theta = theta - eta_theta * problem.grad_theta(theta, rho)
        rho = rho - eta_rho * problem.grad_rho(theta, rho)
    errors[steps] = np.sum((theta - theta_star) ** 2) + np.sum((rho - rho_star) ** 2)
    return errors
