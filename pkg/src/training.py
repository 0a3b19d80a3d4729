"""
Training Module
Cross-regularization training loops. Model parameters descend the training
loss; regularization parameters descend the regularization-set loss, every
reg_interval steps, using the model parameters after that step's update.

- train_l2: magnitude x direction linear model (rho = ||w||)
- train_projected: gradient split along the L1 or derivative-norm direction
- train_noisy / NoisyTrainer: learnable noise scales (and optionally a
  learnable shift augmentation) with Monte-Carlo averaged regularization loss
- train_growth: noisy training that switches from a small to the full
  training set mid-run
- train_gaussian: the univariate Gaussian with a learned noise scale

Loops never raise on divergence: the record is marked aborted and keeps the
partial trace.
"""

from typing import Callable, Iterator, Optional

import numpy as np

from .datagen import SplitDataset
from .metrics import accuracy, ece, gen_gap
from .models import (
    RHO_MIN,
    GaussianUnivariate,
    LinearModel,
    LinearReparam,
    NoisyMlp,
    SplineModel,
    gaussian_nll,
    linear_bias_grad,
    linear_grads,
    linear_mse,
    loss_and_grads,
    mc_loss_and_grads,
    mlp_forward,
    output_loss,
    sample_noise,
    softmax,
)
from .numkit import spawn_rngs
from .optim import NonFiniteGradientError, RegularizerSpec, TrainConfig, make_optimizer
from .records import GuardedSplit, IsolationMonitor, RunRecord
from .regops import (
    AugmentParams,
    DegenerateDirectionError,
    alpha_grad,
    augment_sample,
    clamp_sign_changes,
    deriv_norm_direction,
    l1_direction,
    l1_step_signs,
    project,
)

# Named random streams of the noisy loop; each mechanism draws from its own
NOISY_STREAMS = ("train_batches", "noise", "reg_batches", "augment")

# Warn when more than this share of rho-steps had no usable direction
DEGENERATE_WARN_SHARE = 0.5

PROJECTED_DIRECTIONS = ("l1", "deriv_norm")


def say(message: str, message_callback: Optional[Callable[[str], None]] = None):
    if message_callback is not None:
        message_callback(message)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled minibatch indices for one epoch; a single ordered batch when it fits."""
    if batch_size >= n:
        yield np.arange(n)
        return
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def reg_batch(n_reg: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw with replacement of min(n_reg, batch_size) regularization rows."""
    return rng.integers(0, n_reg, size=min(n_reg, batch_size))


def is_reg_step(step: int, cfg: TrainConfig) -> bool:
    """True when the rho-update follows theta-update number `step` (1-based)."""
    return step > cfg.reg_start_step and (step - cfg.reg_start_step) % cfg.reg_interval == 0


def _diverged(value: float, cfg: TrainConfig) -> bool:
    return not np.isfinite(value) or value > cfg.divergence_threshold


def _new_record(spec: RegularizerSpec, rho_names, cfg: TrainConfig) -> RunRecord:
    return RunRecord(
        regularizer=spec.value,
        rho_names=list(rho_names),
        seed=cfg.seed,
        config=cfg.model_dump(),
    )


def _finish(record: RunRecord, monitor: IsolationMonitor) -> RunRecord:
    record.isolation = monitor.to_dict()
    return record.finish()


# ---------------------------------------------------------------------------
# L2: magnitude x direction
# ---------------------------------------------------------------------------

def train_l2(model: LinearReparam, data: SplitDataset, cfg: TrainConfig,
             monitor: Optional[IsolationMonitor] = None,
             message_callback=None) -> RunRecord:
    """
    Alternate direction steps on the training MSE with magnitude steps on the
    regularization MSE.

    The direction step uses the tangent gradient, then renormalizes theta
    onto the unit sphere. With theta_step_scaling="weight" the tangent
    gradient is divided by rho^2, which is a projected step on the sphere of
    radius rho in weight space. The model is updated in place.
    """
    monitor = monitor or IsolationMonitor()
    split = GuardedSplit(data, monitor)
    record = _new_record(RegularizerSpec.L2_REPARAM, ["rho"], cfg)
    rngs = spawn_rngs(cfg.seed, ("train_batches",))

    theta_params = {"theta": model.theta}
    if model.bias is not None:
        theta_params["bias"] = np.array([model.bias])
    rho_params = {"rho": np.array([model.rho])}
    opt_theta = make_optimizer(cfg, cfg.lr_theta)
    opt_rho = make_optimizer(cfg, cfg.lr_rho)

    step = 0
    try:
        for epoch in range(cfg.epochs):
            for index in minibatches(len(split.train), cfg.batch_size, rngs["train_batches"]):
                with monitor.in_phase("theta"):
                    X, y = split.train.rows(index)
                    tangent, _ = linear_grads(model, X, y)
                    if cfg.theta_step_scaling == "weight":
                        tangent = tangent / max(model.rho, RHO_MIN) ** 2
                    grads = {"theta": tangent}
                    if model.bias is not None:
                        grads["bias"] = np.array([linear_bias_grad(model, X, y)])
                    opt_theta.step(theta_params, grads)
                    theta_params["theta"] /= np.linalg.norm(theta_params["theta"])
                    model.theta = theta_params["theta"]
                    if model.bias is not None:
                        model.bias = float(theta_params["bias"][0])
                step += 1

                if is_reg_step(step, cfg):
                    with monitor.in_phase("rho"):
                        X_reg, y_reg = split.reg.rows()
                        _, grad_rho = linear_grads(model, X_reg, y_reg)
                        opt_rho.step(rho_params, {"rho": np.array([grad_rho])})
                        rho_params["rho"][0] = max(rho_params["rho"][0], RHO_MIN)
                        model.rho = float(rho_params["rho"][0])

            with monitor.in_phase("eval"):
                train_loss = linear_mse(model, *split.train.rows())
                reg_loss = linear_mse(model, *split.reg.rows())
                test_loss = linear_mse(model, *split.test.rows())
            record.add_row(epoch, train_loss, reg_loss, test_loss,
                           gen_gap(train_loss, test_loss, "loss"), [model.rho])
            if _diverged(train_loss, cfg):
                record.abort(f"Training loss {train_loss:.6g} diverged at epoch {epoch}")
                say(record.message, message_callback)
                break
    except NonFiniteGradientError as exc:
        record.abort(str(exc))
        say(record.message, message_callback)

    record.counters["steps"] = step
    return _finish(record, monitor)


# ---------------------------------------------------------------------------
# Projected gradients: L1 and derivative norm
# ---------------------------------------------------------------------------

class _ProjectedProblem:
    """Flat weight vector, feature map and complexity direction of a projected run."""

    def __init__(self, model, direction: str):
        if direction not in PROJECTED_DIRECTIONS:
            raise ValueError(f"direction must be one of {PROJECTED_DIRECTIONS}, got '{direction}'")
        self.model = model
        self.direction = direction
        if isinstance(model, SplineModel):
            self.weights = model.beta
            self.features = lambda X: model.design(X[:, 0])
        elif isinstance(model, LinearModel):
            self.weights = model.w
            self.features = lambda X: X
        else:
            raise TypeError(f"Projected training needs a LinearModel or SplineModel, got {type(model).__name__}")
        if direction == "deriv_norm" and not isinstance(model, SplineModel):
            raise ValueError("The derivative-norm direction needs a SplineModel")

    @property
    def bias(self) -> Optional[float]:
        return getattr(self.model, "bias", None)

    def unit_direction(self) -> np.ndarray:
        if self.direction == "l1":
            return l1_direction(self.weights)
        return deriv_norm_direction(self.weights, self.model.D)

    def train_step_grad(self, g) -> np.ndarray:
        """Training gradient without its complexity component; L1 steps also hold frozen zeros."""
        if self.direction == "l1":
            signs, frozen = l1_step_signs(self.weights, g)
            return project(np.where(frozen, 0.0, g), signs).g_perp
        return project(g, self.unit_direction()).g_perp

    def predict(self, X) -> np.ndarray:
        out = self.features(X) @ self.weights
        return out if self.bias is None else out + self.bias

    def mse(self, X, y) -> float:
        return float(np.mean((self.predict(X) - y) ** 2))

    def grads(self, X, y):
        features = self.features(X)
        residual = features @ self.weights + (self.bias or 0.0) - y
        d_pred = 2.0 * residual / residual.shape[0]
        return features.T @ d_pred, float(d_pred.sum())

    def complexity(self) -> float:
        if self.direction == "l1":
            return float(np.abs(self.weights).sum())
        return self.model.penalty()


def _clamp_crossings(before, w: np.ndarray, *optimizers) -> int:
    """Zero the L1 weights that changed sign in a step, with their optimizer state."""
    crossed = clamp_sign_changes(before, w)
    if crossed.any():
        for optimizer in optimizers:
            optimizer.forget("w", crossed)
    return int(crossed.sum())


def train_projected(model, data: SplitDataset, cfg: TrainConfig, direction: str = "l1",
                    monitor: Optional[IsolationMonitor] = None,
                    message_callback=None) -> RunRecord:
    """
    Train with the gradient split along a characteristic complexity direction.

    Training steps apply only the part of the training gradient orthogonal to
    the direction; regularization steps apply only the part of the
    regularization-set gradient along it. While the direction is zero (for
    example at an all-zero start) the training step uses the full gradient
    and the regularization step is skipped. The model is updated in place.

    L1 steps work orthant by orthant: a weight whose sign flips in a step is
    set to zero, and a zero weight stays there until its training gradient
    beats the active-set multiplier (see regops.l1_step_signs).

    Parameters
    ----------
    model : LinearModel or SplineModel
        Linear weights for direction="l1"; spline coefficients for either.
    direction : str
        "l1" (sign(w) / ||sign(w)||) or "deriv_norm" (D^T D beta normalized).
    """
    problem = _ProjectedProblem(model, direction)
    spec = (RegularizerSpec.L1_PROJECTION if direction == "l1"
            else RegularizerSpec.DERIV_NORM_PROJECTION)
    monitor = monitor or IsolationMonitor()
    split = GuardedSplit(data, monitor)
    record = _new_record(spec, ["l1_norm" if direction == "l1" else "deriv_norm_sq"], cfg)
    rngs = spawn_rngs(cfg.seed, ("train_batches",))

    params = {"w": problem.weights}
    if problem.bias is not None:
        params["bias"] = np.array([problem.bias])
    opt_theta = make_optimizer(cfg, cfg.lr_theta)
    opt_rho = make_optimizer(cfg, cfg.lr_rho)

    step = 0
    reg_steps = 0
    skipped = 0
    clamped = 0
    try:
        for epoch in range(cfg.epochs):
            for index in minibatches(len(split.train), cfg.batch_size, rngs["train_batches"]):
                with monitor.in_phase("theta"):
                    X, y = split.train.rows(index)
                    g, g_bias = problem.grads(X, y)
                    try:
                        g = problem.train_step_grad(g)
                    except DegenerateDirectionError:
                        pass
                    grads = {"w": g}
                    if problem.bias is not None:
                        grads["bias"] = np.array([g_bias])
                    before = params["w"].copy()
                    opt_theta.step(params, grads)
                    if direction == "l1":
                        clamped += _clamp_crossings(before, params["w"], opt_theta, opt_rho)
                    if problem.bias is not None:
                        model.bias = float(params["bias"][0])
                step += 1

                if is_reg_step(step, cfg):
                    reg_steps += 1
                    with monitor.in_phase("rho"):
                        X_reg, y_reg = split.reg.rows()
                        g_val, _ = problem.grads(X_reg, y_reg)
                        try:
                            g_rho = project(g_val, problem.unit_direction()).g_rho
                        except DegenerateDirectionError:
                            skipped += 1
                        else:
                            before = params["w"].copy()
                            opt_rho.step({"w": params["w"]}, {"w": g_rho})
                            if direction == "l1":
                                clamped += _clamp_crossings(before, params["w"], opt_theta, opt_rho)

            with monitor.in_phase("eval"):
                train_loss = problem.mse(*split.train.rows())
                reg_loss = problem.mse(*split.reg.rows())
                test_loss = problem.mse(*split.test.rows())
            extras = {}
            if direction == "l1":
                extras["nnz"] = int(np.count_nonzero(problem.weights))
            record.add_row(epoch, train_loss, reg_loss, test_loss,
                           gen_gap(train_loss, test_loss, "loss"), [problem.complexity()], **extras)
            if _diverged(train_loss, cfg):
                record.abort(f"Training loss {train_loss:.6g} diverged at epoch {epoch}")
                say(record.message, message_callback)
                break
    except NonFiniteGradientError as exc:
        record.abort(str(exc))
        say(record.message, message_callback)

    if reg_steps and skipped > DEGENERATE_WARN_SHARE * reg_steps:
        warning = (
            f"The complexity direction was zero in {skipped} of {reg_steps} "
            "regularization steps; those steps were skipped."
        )
        record.warnings.append(warning)
        say(warning, message_callback)
    record.counters.update({"steps": step, "reg_steps": reg_steps, "skipped_reg_steps": skipped})
    if direction == "l1":
        record.counters["clamped_weights"] = clamped
    return _finish(record, monitor)


# ---------------------------------------------------------------------------
# Learnable noise (and augmentation)
# ---------------------------------------------------------------------------

class NoisyTrainer:
    """
    State of a noisy cross-regularization run.

    Per training batch: one noise draw per layer, then a theta step on the
    training loss. Every reg_interval steps: a regularization batch, K noisy
    passes averaged, then a step on the log noise scales (and the shift
    amplitude when augmenting). Metrics use the noise-free network.

    The trainer can be fitted on several splits in turn, which keeps the
    optimizer states, random streams and step counter (used by train_growth).
    """

    def __init__(self, model: NoisyMlp, cfg: TrainConfig, augment: Optional[AugmentParams] = None,
                 monitor: Optional[IsolationMonitor] = None, message_callback=None,
                 progress_callback=None):
        self.model = model
        self.cfg = cfg
        self.augment = augment
        self.monitor = monitor or IsolationMonitor()
        self.message_callback = message_callback
        self.progress_callback = progress_callback
        self.rngs = spawn_rngs(cfg.seed, NOISY_STREAMS)
        self.opt_theta = make_optimizer(cfg, cfg.lr_theta)
        self.opt_rho = make_optimizer(cfg, cfg.lr_rho)
        self.rho_params = dict(model.rho_params())
        if augment is not None:
            self.rho_params["alpha"] = np.array([augment.alpha])
        self.step_count = 0
        self.epoch = 0
        self.train_forwards = 0
        self.reg_forwards = 0

        rho_names = [f"sigma_{i}" for i in range(model.n_layers)]
        if augment is not None:
            rho_names.append("alpha")
        spec = RegularizerSpec.AUGMENT_MAGNITUDE if augment is not None else RegularizerSpec.NOISE_SCALES
        self.record = _new_record(spec, rho_names, cfg)

    @property
    def theta_names(self):
        return list(self.model.theta_params())

    def rho_snapshot(self) -> np.ndarray:
        values = list(self.model.sigmas)
        if self.augment is not None:
            values.append(self.augment.alpha)
        return np.array(values)

    def _train_step(self, split: GuardedSplit, index: np.ndarray):
        with self.monitor.in_phase("theta"):
            X, y = split.train.rows(index)
            if self.augment is not None:
                X = augment_sample(X, self.augment, self.rngs["augment"]).x_aug
            eps = sample_noise(self.model, X.shape[0], self.rngs["noise"])
            result = loss_and_grads(self.model, X, y, eps)
            self.train_forwards += 1
            self.opt_theta.step(self.model.theta_params(),
                                {name: result.grads[name] for name in self.theta_names})
        return result.loss

    def _reg_step(self, split: GuardedSplit):
        cfg = self.cfg
        with self.monitor.in_phase("rho"):
            index = reg_batch(len(split.reg), cfg.batch_size, self.rngs["reg_batches"])
            X, y = split.reg.rows(index)
            draws = None
            if self.augment is not None:
                draws = [augment_sample(X, self.augment, self.rngs["augment"])
                         for _ in range(cfg.mc_samples)]
            mc = mc_loss_and_grads(self.model, X, y, cfg.mc_samples, self.rngs["noise"],
                                   cfg.mc_space, [d.x_aug for d in draws] if draws else None)
            self.reg_forwards += cfg.mc_samples
            grads = {"log_sigma": mc.grads["log_sigma"]}
            if draws is not None:
                grads["alpha"] = np.array([
                    sum(alpha_grad(draw, d_x) for draw, d_x in zip(draws, mc.d_inputs))
                ])
            self.opt_rho.step(self.rho_params, grads)
            np.minimum(self.model.log_sigma, cfg.log_sigma_max, out=self.model.log_sigma)
            if self.augment is not None:
                self.augment.alpha = float(self.rho_params["alpha"][0])
                self.augment.clamp()
                self.rho_params["alpha"][0] = self.augment.alpha
        return mc.loss

    def evaluate(self, split: GuardedSplit):
        """Noise-free losses and metrics on the three partitions."""
        with self.monitor.in_phase("eval"):
            results = {}
            for name, part in (("train", split.train), ("reg", split.reg), ("test", split.test)):
                X, y = part.rows()
                if self.augment is not None and self.cfg.augment_at_test:
                    X = augment_sample(X, self.augment, self.rngs["augment"]).x_aug
                outputs, _ = mlp_forward(self.model, X)
                loss, _ = output_loss(self.model, outputs, y)
                results[name] = (loss, outputs, y)
        return results

    def _log_epoch(self, split: GuardedSplit):
        results = self.evaluate(split)
        train_loss, train_out, train_y = results["train"]
        reg_loss = results["reg"][0]
        test_loss, test_out, test_y = results["test"]
        extras = {"sigma_sum": float(self.model.sigmas.sum())}
        if self.model.task == "classification":
            train_metric = accuracy(softmax(train_out), train_y)
            test_metric = accuracy(softmax(test_out), test_y)
            gap = gen_gap(train_metric, test_metric, "accuracy")
            finite = np.all(np.isfinite(test_out))
            extras["ece"] = ece(softmax(test_out), test_y).ece if finite else float("nan")
        else:
            train_metric, test_metric = train_loss, test_loss
            gap = gen_gap(train_loss, test_loss, "loss")
        extras["train_metric"] = train_metric
        extras["test_loss"] = test_loss
        self.record.add_row(self.epoch, train_loss, reg_loss, test_metric, gap,
                            self.rho_snapshot(), **extras)
        return train_loss

    def fit(self, data: SplitDataset, epochs: int) -> RunRecord:
        """Run `epochs` more epochs on data, appending to the record."""
        split = GuardedSplit(data, self.monitor)
        cfg = self.cfg
        for _ in range(epochs):
            if not self.record.completed:
                break
            try:
                for index in minibatches(len(split.train), cfg.batch_size, self.rngs["train_batches"]):
                    loss = self._train_step(split, index)
                    self.step_count += 1
                    if _diverged(loss, cfg):
                        raise FloatingPointError(
                            f"Training loss {loss:.6g} diverged at step {self.step_count}"
                        )
                    if is_reg_step(self.step_count, cfg):
                        reg_loss = self._reg_step(split)
                        if not np.isfinite(reg_loss):
                            raise FloatingPointError(
                                f"Regularization loss is not finite at step {self.step_count}"
                            )
            except FloatingPointError as exc:
                self.record.abort(str(exc))
                say(self.record.message, self.message_callback)
            train_loss = self._log_epoch(split)
            if self.record.completed and _diverged(train_loss, cfg):
                self.record.abort(f"Training loss {train_loss:.6g} diverged at epoch {self.epoch}")
                say(self.record.message, self.message_callback)
            self.epoch += 1
            if self.progress_callback is not None:
                self.progress_callback(self.epoch / max(cfg.epochs, 1), f"Epoch {self.epoch} of {cfg.epochs}")
        return self.record

    def result(self) -> RunRecord:
        self.record.counters.update({
            "steps": self.step_count,
            "train_forwards": self.train_forwards,
            "reg_forwards": self.reg_forwards,
            "reg_overhead": self.reg_forwards / max(self.train_forwards, 1),
        })
        return _finish(self.record, self.monitor)


def train_noisy(model: NoisyMlp, data: SplitDataset, cfg: TrainConfig,
                augment: Optional[AugmentParams] = None,
                monitor: Optional[IsolationMonitor] = None,
                message_callback=None, progress_callback=None) -> RunRecord:
    """Cross-regularization of noise scales (and shift amplitude) for cfg.epochs epochs."""
    trainer = NoisyTrainer(model, cfg, augment, monitor, message_callback, progress_callback)
    trainer.fit(data, cfg.epochs)
    return trainer.result()


def _is_train_subset(small: SplitDataset, full: SplitDataset) -> bool:
    if small.indices is not None and full.indices is not None:
        return bool(np.isin(small.indices["train"], full.indices["train"]).all())
    full_rows = {row.tobytes() for row in np.ascontiguousarray(full.train.X)}
    return all(row.tobytes() in full_rows for row in np.ascontiguousarray(small.train.X))


def train_growth(model: NoisyMlp, data_small: SplitDataset, data_full: SplitDataset,
                 transition_epoch: int, cfg: TrainConfig,
                 monitor: Optional[IsolationMonitor] = None,
                 message_callback=None, progress_callback=None) -> RunRecord:
    """
    Noisy training on data_small up to transition_epoch, then on data_full
    with the same parameters, optimizer states and random streams.

    The record's sigma_sum column tracks the total noise scale per epoch.
    """
    if not 0 <= transition_epoch <= cfg.epochs:
        raise ValueError(f"transition_epoch must lie in [0, {cfg.epochs}], got {transition_epoch}")
    if not _is_train_subset(data_small, data_full):
        raise ValueError("The small training set must be a subset of the full training set")
    trainer = NoisyTrainer(model, cfg, None, monitor, message_callback, progress_callback)
    if transition_epoch > 0:
        trainer.fit(data_small, transition_epoch)
        say(f"Switching to the full training set after epoch {transition_epoch}", message_callback)
    trainer.fit(data_full, cfg.epochs - transition_epoch)
    trainer.record.counters["transition_epoch"] = transition_epoch
    return trainer.result()


# ---------------------------------------------------------------------------
# Univariate Gaussian
# ---------------------------------------------------------------------------

def _pair(part):
    X, y = part.rows()
    return X[:, 0], y


def train_gaussian(model: GaussianUnivariate, data: SplitDataset, cfg: TrainConfig,
                   monitor: Optional[IsolationMonitor] = None) -> RunRecord:
    """
    w descends the training negative log-likelihood, log sigma descends the
    regularization one; one full-batch step per epoch. Updated in place.

    Trained alone on one pair, sigma collapses towards zero; the
    regularization pair pulls it to |y_reg - w x_reg|.
    """
    monitor = monitor or IsolationMonitor()
    split = GuardedSplit(data, monitor)
    record = _new_record(RegularizerSpec.NOISE_SCALES, ["sigma"], cfg)
    theta_params = {"w": np.array([model.w])}
    rho_params = {"log_sigma": np.array([model.log_sigma])}
    opt_theta = make_optimizer(cfg, cfg.lr_theta)
    opt_rho = make_optimizer(cfg, cfg.lr_rho)

    try:
        for epoch in range(cfg.epochs):
            with monitor.in_phase("theta"):
                fit = gaussian_nll(model, *_pair(split.train))
                opt_theta.step(theta_params, {"w": np.array([fit.grad_w])})
                model.w = float(theta_params["w"][0])
            if is_reg_step(epoch + 1, cfg):
                with monitor.in_phase("rho"):
                    fit = gaussian_nll(model, *_pair(split.reg))
                    opt_rho.step(rho_params, {"log_sigma": np.array([fit.grad_log_sigma])})
                    rho_params["log_sigma"][0] = min(rho_params["log_sigma"][0], cfg.log_sigma_max)
                    model.sigma = float(np.exp(rho_params["log_sigma"][0]))
            with monitor.in_phase("eval"):
                train_nll = gaussian_nll(model, *_pair(split.train)).loss
                reg_nll = gaussian_nll(model, *_pair(split.reg)).loss
                test_nll = gaussian_nll(model, *_pair(split.test)).loss
            record.add_row(epoch, train_nll, reg_nll, test_nll,
                           gen_gap(train_nll, test_nll, "loss"), [model.sigma], w=model.w)
            if not np.isfinite(train_nll) or model.sigma <= 0:
                record.abort(f"Noise scale collapsed at epoch {epoch}")
                break
    except NonFiniteGradientError as exc:
        record.abort(str(exc))
    return _finish(record, monitor)
