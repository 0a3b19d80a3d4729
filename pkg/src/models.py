"""
Models Module
The model families trained by cross-regularization, each with analytic
gradients:

- LinearReparam: linear model with weights written as magnitude x direction
- SplineModel: cubic B-spline regression with a second-difference penalty
- NoisyMlp: feedforward network with layer normalization and learnable
  additive noise after each normalization, plus Monte-Carlo prediction
- GaussianUnivariate: y ~ N(w x, sigma^2), the smallest noisy model

Checkpoints are JSON files whose arrays are stored as hex floats, so every
float64 value (including infinities) round-trips bit-equal.
"""

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.interpolate import BSpline

from .numkit import gauss

RHO_MIN = 1e-8
UNIT_TOL = 1e-9

SPLINE_DEGREE = 3
SPLINE_KNOTS = 15

LN_EPS = 1e-5
LOG_SIGMA_INIT = -3.0
LOG_SIGMA_MAX = 5.0

MC_SPACES = ("prob", "logit")


# ---------------------------------------------------------------------------
# Linear model, magnitude x direction
# ---------------------------------------------------------------------------

@dataclass
class LinearReparam:
    """Weights w = rho * theta with ||theta|| = 1; rho is the L2 magnitude."""

    rho: float
    theta: np.ndarray
    bias: Optional[float] = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.rho = float(self.rho)
        if self.rho < 0:
            raise ValueError(f"rho must be non-negative, got {self.rho}")
        norm = np.linalg.norm(self.theta)
        if abs(norm - 1.0) > UNIT_TOL:
            raise ValueError(f"theta must be a unit vector, got norm {norm:.12g}")

    @classmethod
    def from_weights(cls, w, bias: Optional[float] = None) -> "LinearReparam":
        """Decompose w into (||w||, w / ||w||); w = 0 maps to rho_min along e_0."""
        w = np.asarray(w, dtype=np.float64)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            theta = np.zeros_like(w)
            theta[0] = 1.0
            return cls(RHO_MIN, theta, bias)
        return cls(norm, w / norm, bias)

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, rho: float = 1.0,
               bias: Optional[float] = None) -> "LinearReparam":
        """Uniform random direction on the unit sphere."""
        direction = gauss(rng, dim)
        return cls(rho, direction / np.linalg.norm(direction), bias)

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    def weights(self) -> np.ndarray:
        return self.rho * self.theta


def linear_forward(m: LinearReparam, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.dim:
        raise ValueError(
            f"X has shape {X.shape} but the model direction has dimension {m.dim}"
        )
    out = m.rho * (X @ m.theta)
    if m.bias is not None:
        out = out + m.bias
    return out


def linear_grads(m: LinearReparam, X, y):
    """
    Gradients of the mean squared error for the reparameterized model.

    Returns
    -------
    grad_theta_tangent : ndarray
        Euclidean gradient with respect to theta with its component along
        theta removed (tangent to the unit sphere).
    grad_rho : float
        Partial derivative with respect to rho.
    """
    X = np.asarray(X, dtype=np.float64)
    residual = linear_forward(m, X) - np.asarray(y, dtype=np.float64)
    d_pred = 2.0 * residual / residual.shape[0]
    direction_out = X @ m.theta
    grad_rho = float(d_pred @ direction_out)
    grad_theta = m.rho * (X.T @ d_pred)
    tangent = grad_theta - m.theta * (m.theta @ grad_theta)
    return tangent, grad_rho


@dataclass
class LinearModel:
    """Plain linear model with a flat weight vector, for projected training."""

    w: np.ndarray
    bias: Optional[float] = None

    @classmethod
    def zeros(cls, dim: int, bias: bool = False) -> "LinearModel":
        return cls(np.zeros(dim), 0.0 if bias else None)

    def predict(self, X) -> np.ndarray:
        out = np.asarray(X, dtype=np.float64) @ self.w
        return out if self.bias is None else out + self.bias


def linear_bias_grad(m: LinearReparam, X, y) -> float:
    residual = linear_forward(m, X) - np.asarray(y, dtype=np.float64)
    return float(2.0 * residual.mean())


def linear_mse(m: LinearReparam, X, y) -> float:
    residual = linear_forward(m, X) - np.asarray(y, dtype=np.float64)
    return float(np.mean(residual ** 2))


# ---------------------------------------------------------------------------
# Cubic B-spline regression
# ---------------------------------------------------------------------------

def open_uniform_knots(knots: int = SPLINE_KNOTS, degree: int = SPLINE_DEGREE) -> np.ndarray:
    """Knot vector: `knots` evenly spaced points on [0, 1], ends repeated `degree` more times."""
    if knots < 2:
        raise ValueError(f"knots must be at least 2, got {knots}")
    inner = np.linspace(0.0, 1.0, knots)
    return np.concatenate([np.zeros(degree), inner, np.ones(degree)])


def bspline_design(x, knots: int = SPLINE_KNOTS, degree: int = SPLINE_DEGREE) -> np.ndarray:
    """
    Design matrix of the open-uniform B-spline basis evaluated at x.

    There are knots + degree - 1 columns and every row sums to one.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(
            f"Spline inputs must lie in [0, 1], got range [{x.min():.6g}, {x.max():.6g}]"
        )
    t = open_uniform_knots(knots, degree)
    return BSpline.design_matrix(x, t, degree).toarray()


def second_diff_matrix(n_basis: int) -> np.ndarray:
    """
    Second-difference matrix with stencil (1, -2, 1) on each row.

    Scaled so that trace(D^T D) = n_basis.
    """
    if n_basis < 3:
        raise ValueError(f"n_basis must be at least 3, got {n_basis}")
    rows = n_basis - 2
    D = np.zeros((rows, n_basis))
    index = np.arange(rows)
    D[index, index] = 1.0
    D[index, index + 1] = -2.0
    D[index, index + 2] = 1.0
    # Each row contributes 1 + 4 + 1 to the trace
    return D * np.sqrt(n_basis / (6.0 * rows))


@dataclass
class SplineModel:
    beta: np.ndarray
    knots: np.ndarray
    D: np.ndarray
    degree: int = SPLINE_DEGREE
    n_knots: int = SPLINE_KNOTS

    @classmethod
    def create(cls, knots: int = SPLINE_KNOTS, degree: int = SPLINE_DEGREE) -> "SplineModel":
        n_basis = knots + degree - 1
        return cls(
            beta=np.zeros(n_basis),
            knots=open_uniform_knots(knots, degree),
            D=second_diff_matrix(n_basis),
            degree=degree,
            n_knots=knots,
        )

    @property
    def n_basis(self) -> int:
        return self.beta.shape[0]

    def design(self, x) -> np.ndarray:
        return bspline_design(x, self.n_knots, self.degree)

    def predict(self, x) -> np.ndarray:
        return self.design(x) @ self.beta

    def penalty(self) -> float:
        """||D beta||^2"""
        d_beta = self.D @ self.beta
        return float(d_beta @ d_beta)


# ---------------------------------------------------------------------------
# Feedforward network with learnable additive noise
# ---------------------------------------------------------------------------

@dataclass
class NoisyMlp:
    """
    Hidden layers Linear -> LayerNorm (no affine) -> + sigma_l * eps -> ReLU,
    followed by a linear head.

    Hidden layers carry no bias: a normalization without affine parameters
    removes any constant shift. log_sigma = -inf disables a layer's noise.
    """

    weights: List[np.ndarray]
    log_sigma: np.ndarray
    head_W: np.ndarray
    head_b: np.ndarray
    task: str = "classification"

    @classmethod
    def create(cls, sizes: Sequence[int], rng: np.random.Generator,
               log_sigma_init: float = LOG_SIGMA_INIT,
               task: str = "classification") -> "NoisyMlp":
        """
        He-initialized network.

        Parameters
        ----------
        sizes : sequence of int
            Input width, hidden widths, output width, e.g. (2, 64, 64, 64, 4).
        rng : numpy Generator
            Source of the initial weights.
        log_sigma_init : float
            Initial log noise scale of every hidden layer; -inf for no noise.
        task : str
            "classification" (softmax head) or "regression" (one output).
        """
        sizes = [int(s) for s in sizes]
        if len(sizes) < 3:
            raise ValueError(f"A NoisyMlp needs at least one hidden layer, got sizes {sizes}")
        if task not in ("classification", "regression"):
            raise ValueError(f"Unknown task '{task}'")
        weights = [
            gauss(rng, (fan_in, fan_out), np.sqrt(2.0 / fan_in))
            for fan_in, fan_out in zip(sizes[:-2], sizes[1:-1])
        ]
        head_W = gauss(rng, (sizes[-2], sizes[-1]), np.sqrt(1.0 / sizes[-2]))
        return cls(
            weights=weights,
            log_sigma=np.full(len(weights), float(log_sigma_init)),
            head_W=head_W,
            head_b=np.zeros(sizes[-1]),
            task=task,
        )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def widths(self) -> List[int]:
        return [W.shape[1] for W in self.weights]

    @property
    def sigmas(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def theta_params(self) -> Dict[str, np.ndarray]:
        """Model parameters, trained on the training set."""
        params = {f"W{i}": W for i, W in enumerate(self.weights)}
        params["head_W"] = self.head_W
        params["head_b"] = self.head_b
        return params

    def rho_params(self) -> Dict[str, np.ndarray]:
        """Regularization parameters, trained on the regularization set."""
        return {"log_sigma": self.log_sigma}

    def copy(self) -> "NoisyMlp":
        return copy.deepcopy(self)


class ForwardCache(NamedTuple):
    inputs: List[np.ndarray]
    normalized: List[np.ndarray]
    inv_std: List[np.ndarray]
    pre_relu: List[np.ndarray]
    eps: Optional[List[np.ndarray]]
    hidden: np.ndarray


def sample_noise(m: NoisyMlp, n: int, rng: np.random.Generator) -> List[np.ndarray]:
    """One standard-normal (n, width) draw per hidden layer."""
    return [gauss(rng, (n, width)) for width in m.widths]


def layer_norm(u: np.ndarray):
    """Per-row normalization to zero mean and unit variance; returns (u_hat, 1/std)."""
    centered = u - u.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered ** 2, axis=1, keepdims=True) + LN_EPS)
    return centered * inv_std, inv_std


def mlp_forward(m: NoisyMlp, x, eps: Optional[List[np.ndarray]] = None):
    """
    Forward pass. eps=None is the deterministic (zero-noise) prediction.

    Returns (outputs, cache); outputs are logits for classification.
    """
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if h.shape[1] != m.weights[0].shape[0]:
        raise ValueError(
            f"Input has {h.shape[1]} features but the network expects {m.weights[0].shape[0]}"
        )
    if eps is not None and len(eps) != m.n_layers:
        raise ValueError(f"Expected {m.n_layers} noise arrays, got {len(eps)}")

    sigmas = m.sigmas
    inputs, normalized, inv_stds, pre_relu = [], [], [], []
    for layer, W in enumerate(m.weights):
        inputs.append(h)
        u_hat, inv_std = layer_norm(h @ W)
        z = u_hat
        if eps is not None and sigmas[layer] > 0:
            z = u_hat + sigmas[layer] * eps[layer]
        normalized.append(u_hat)
        inv_stds.append(inv_std)
        pre_relu.append(z)
        h = np.maximum(z, 0.0)
    outputs = h @ m.head_W + m.head_b
    return outputs, ForwardCache(inputs, normalized, inv_stds, pre_relu, eps, h)


def mlp_backward(m: NoisyMlp, cache: ForwardCache, d_out: np.ndarray):
    """
    Backpropagate d_out (gradient of the loss wrt the outputs).

    Returns (grads, d_input) where grads has one entry per theta and rho
    parameter name.
    """
    grads = {
        "head_W": cache.hidden.T @ d_out,
        "head_b": d_out.sum(axis=0),
    }
    d_h = d_out @ m.head_W.T
    d_log_sigma = np.zeros(m.n_layers)
    sigmas = m.sigmas
    for layer in reversed(range(m.n_layers)):
        d_z = d_h * (cache.pre_relu[layer] > 0)
        if cache.eps is not None and sigmas[layer] > 0:
            # d(sigma * eps)/d(log sigma) = sigma * eps
            d_log_sigma[layer] = sigmas[layer] * np.sum(d_z * cache.eps[layer])
        u_hat = cache.normalized[layer]
        width = u_hat.shape[1]
        d_u = cache.inv_std[layer] / width * (
            width * d_z
            - d_z.sum(axis=1, keepdims=True)
            - u_hat * np.sum(d_z * u_hat, axis=1, keepdims=True)
        )
        grads[f"W{layer}"] = cache.inputs[layer].T @ d_u
        d_h = d_u @ m.weights[layer].T
    grads["log_sigma"] = d_log_sigma
    return grads, d_h


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def output_loss(m: NoisyMlp, outputs: np.ndarray, y):
    """Mean loss and its gradient wrt the outputs (cross-entropy or squared error)."""
    n = outputs.shape[0]
    if m.task == "classification":
        y = np.asarray(y, dtype=np.int64)
        probs = softmax(outputs)
        picked = np.clip(probs[np.arange(n), y], 1e-300, None)
        d_out = probs.copy()
        d_out[np.arange(n), y] -= 1.0
        return float(-np.mean(np.log(picked))), d_out / n
    residual = outputs[:, 0] - np.asarray(y, dtype=np.float64)
    d_out = (2.0 * residual / n)[:, None]
    return float(np.mean(residual ** 2)), d_out


class LossResult(NamedTuple):
    loss: float
    grads: Dict[str, np.ndarray]
    d_input: np.ndarray
    outputs: np.ndarray


def loss_and_grads(m: NoisyMlp, x, y, eps: Optional[List[np.ndarray]] = None) -> LossResult:
    """Single forward/backward pass with a fixed noise draw (or none)."""
    outputs, cache = mlp_forward(m, x, eps)
    loss, d_out = output_loss(m, outputs, y)
    grads, d_input = mlp_backward(m, cache, d_out)
    return LossResult(loss, grads, d_input, outputs)


def _check_mc_args(K: int, space: str):
    if K < 1:
        raise ValueError(f"Monte-Carlo sample count K must be at least 1, got {K}")
    if space not in MC_SPACES:
        raise ValueError(f"space must be one of {MC_SPACES}, got '{space}'")


def _combine(m: NoisyMlp, outputs: List[np.ndarray], space: str) -> np.ndarray:
    if m.task == "regression":
        return np.mean(outputs, axis=0)
    if space == "prob":
        return np.mean([softmax(o) for o in outputs], axis=0)
    return softmax(np.mean(outputs, axis=0))


def mc_predict(m: NoisyMlp, x, K: int, rng: np.random.Generator,
               space: str = "prob") -> np.ndarray:
    """
    Average of K stochastic forward passes.

    Classification returns class probabilities averaged in probability space
    (space="prob") or the softmax of averaged logits (space="logit");
    regression returns the averaged outputs.
    """
    _check_mc_args(K, space)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    outputs = [mlp_forward(m, x, sample_noise(m, x.shape[0], rng))[0] for _ in range(K)]
    return _combine(m, outputs, space)


class MCResult(NamedTuple):
    loss: float
    grads: Dict[str, np.ndarray]
    prediction: np.ndarray
    d_inputs: List[np.ndarray]


def mc_loss_and_grads(m: NoisyMlp, x, y, K: int, rng: np.random.Generator,
                      space: str = "prob",
                      inputs: Optional[List[np.ndarray]] = None) -> MCResult:
    """
    Loss of the Monte-Carlo averaged prediction and its gradient through all
    K stochastic passes.

    inputs, when given, holds one (already transformed) input array per pass
    in place of x; d_inputs returns the loss gradient wrt each of them.
    """
    _check_mc_args(K, space)
    if inputs is None:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        inputs = [x] * K
    elif len(inputs) != K:
        raise ValueError(f"Expected {K} input arrays, got {len(inputs)}")
    n = inputs[0].shape[0]

    passes = [mlp_forward(m, xk, sample_noise(m, n, rng)) for xk in inputs]
    outputs = [out for out, _ in passes]
    prediction = _combine(m, outputs, space)

    if m.task == "classification":
        y = np.asarray(y, dtype=np.int64)
        rows = np.arange(n)
        picked = np.clip(prediction[rows, y], 1e-300, None)
        loss = float(-np.mean(np.log(picked)))
        if space == "prob":
            d_pred = np.zeros_like(prediction)
            d_pred[rows, y] = -1.0 / (n * picked)
            d_outs = []
            for out in outputs:
                p = softmax(out)
                a = d_pred / K
                d_outs.append(p * (a - np.sum(a * p, axis=1, keepdims=True)))
        else:
            d_mean = prediction.copy()
            d_mean[rows, y] -= 1.0
            d_outs = [d_mean / (n * K)] * K
    else:
        residual = prediction[:, 0] - np.asarray(y, dtype=np.float64)
        loss = float(np.mean(residual ** 2))
        d_outs = [(2.0 * residual / (n * K))[:, None]] * K

    grads: Dict[str, np.ndarray] = {}
    d_inputs = []
    for (_, cache), d_out in zip(passes, d_outs):
        pass_grads, d_input = mlp_backward(m, cache, d_out)
        d_inputs.append(d_input)
        for name, value in pass_grads.items():
            grads[name] = grads[name] + value if name in grads else value
    return MCResult(loss, grads, prediction, d_inputs)


# ---------------------------------------------------------------------------
# Univariate Gaussian
# ---------------------------------------------------------------------------

@dataclass
class GaussianUnivariate:
    w: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def log_sigma(self) -> float:
        return float(np.log(self.sigma))


class NllResult(NamedTuple):
    loss: float
    grad_w: float
    grad_log_sigma: float


def gaussian_nll_terms(w, log_sigma, x, y) -> NllResult:
    """
    Mean negative log-likelihood of N(w x, sigma^2) over the last axis of x
    and y, with gradients wrt w and log sigma.

    w and log_sigma may be arrays with one entry per row of x and y, in which
    case every field of the result has that shape.
    """
    w = np.asarray(w, dtype=np.float64)[..., None]
    log_sigma = np.asarray(log_sigma, dtype=np.float64)[..., None]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    residual = y - w * x
    var = np.exp(2.0 * log_sigma)
    loss = log_sigma + residual ** 2 / (2.0 * var) + 0.5 * np.log(2.0 * np.pi)
    grad_w = -residual * x / var
    grad_log_sigma = 1.0 - residual ** 2 / var
    return NllResult(loss.mean(axis=-1), grad_w.mean(axis=-1), grad_log_sigma.mean(axis=-1))


def gaussian_nll(g: GaussianUnivariate, x, y) -> NllResult:
    """gaussian_nll_terms for one model and one 1-D sample."""
    terms = gaussian_nll_terms(g.w, g.log_sigma, np.ravel(x), np.ravel(y))
    return NllResult(float(terms.loss), float(terms.grad_w), float(terms.grad_log_sigma))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def encode_array(values) -> dict:
    array = np.asarray(values, dtype=np.float64)
    return {"shape": list(array.shape), "hex": [float(v).hex() for v in array.reshape(-1)]}


def decode_array(entry: dict) -> np.ndarray:
    flat = np.array([float.fromhex(v) for v in entry["hex"]], dtype=np.float64)
    return flat.reshape(entry["shape"])


def model_params(model) -> Dict[str, np.ndarray]:
    """Every array that defines a model, by name."""
    if isinstance(model, LinearReparam):
        params = {"rho": np.array(model.rho), "theta": model.theta}
        if model.bias is not None:
            params["bias"] = np.array(model.bias)
        return params
    if isinstance(model, LinearModel):
        params = {"w": model.w}
        if model.bias is not None:
            params["bias"] = np.array(model.bias)
        return params
    if isinstance(model, SplineModel):
        return {"beta": model.beta}
    if isinstance(model, NoisyMlp):
        return {**model.theta_params(), **model.rho_params()}
    if isinstance(model, GaussianUnivariate):
        return {"w": np.array(model.w), "sigma": np.array(model.sigma)}
    raise TypeError(f"No checkpoint format for {type(model).__name__}")


def save_checkpoint(model, path, spec: str) -> Path:
    """Write a model and its regularizer kind to a JSON checkpoint."""
    path = Path(path)
    payload = {
        "model": type(model).__name__,
        "regularizer": str(getattr(spec, "value", spec)),
        "params": {name: encode_array(v) for name, v in model_params(model).items()},
    }
    if isinstance(model, SplineModel):
        payload["structure"] = {"knots": model.n_knots, "degree": model.degree}
    elif isinstance(model, NoisyMlp):
        payload["structure"] = {"task": model.task}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1), encoding="utf-8")
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns (model, regularizer kind)."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    params = {name: decode_array(entry) for name, entry in payload["params"].items()}
    kind = payload["model"]
    structure = payload.get("structure", {})
    if kind == "LinearReparam":
        bias = float(params["bias"]) if "bias" in params else None
        # Bypass the unit-norm check: the stored direction is already exact
        model = LinearReparam.__new__(LinearReparam)
        model.rho, model.theta, model.bias = float(params["rho"]), params["theta"], bias
    elif kind == "LinearModel":
        model = LinearModel(params["w"], float(params["bias"]) if "bias" in params else None)
    elif kind == "SplineModel":
        model = SplineModel.create(structure["knots"], structure["degree"])
        model.beta = params["beta"]
    elif kind == "NoisyMlp":
        n_layers = sum(1 for name in params if name.startswith("W"))
        model = NoisyMlp(
            weights=[params[f"W{i}"] for i in range(n_layers)],
            log_sigma=params["log_sigma"],
            head_W=params["head_W"],
            head_b=params["head_b"],
            task=structure.get("task", "classification"),
        )
    elif kind == "GaussianUnivariate":
        model = GaussianUnivariate(float(params["w"]), float(params["sigma"]))
    else:
        raise ValueError(f"Unknown model type '{kind}' in checkpoint {path}")
    return model, payload["regularizer"]
