"""
Experiments - Runners
One runner per experiment. A runner builds the data and models for a single
seed, trains, compares against the oracle or baseline, and returns a
RunResult; execute_run writes the artifacts of that result into the run
folder.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from ..datagen import (
    Dataset,
    DatasetError,
    SplitDataset,
    gen_blobs,
    gen_correlated,
    gen_shift_patterns,
    gen_spline,
    load_csv,
    load_diabetes,
    split,
    subsample_train,
)
from ..metrics import ece, stat_rate_sweep
from ..models import (
    GaussianUnivariate,
    LinearModel,
    LinearReparam,
    NoisyMlp,
    SplineModel,
    mlp_forward,
    softmax,
)
from ..numkit import make_rng, spawn_rngs
from ..optim import CoupledQuadratic, alternate_quadratic, measure_convergence
from ..oracles import GridResult, lasso_grid, ridge_grid, spline_grid
from ..records import RunRecord
from ..regops import AugmentParams
from ..training import train_gaussian, train_growth, train_l2, train_noisy, train_projected
from .common import (
    CONFIG_NAME,
    LOG_NAME,
    SEEDS_NAME,
    SUMMARY_NAME,
    RunLogger,
    artifact_header,
    config_hash,
    max_workers,
    run_folder,
    run_jobs,
    run_seeds,
    write_atomic,
    write_config,
    write_json,
)
from .config import ConfigError, ExperimentConfig, with_seed

DATA_STREAMS = ("data", "split", "model", "subsample", "theory")

# Pass thresholds of the per-run checks
L2_GAP = 0.01
L2_WEIGHT_ERR = 0.05
L1_GAP = 0.02
L1_SIGN_SHARE = 0.05
SPLINE_GAP = 0.05
SIGMA_RISE = 2.0
GAUSSIAN_TOL = 0.01
CALIBRATED_ECE = 0.01
GROWTH_WINDOW = 20
GROWTH_METRIC_DROP = 0.02
RATE_SLOPE = (-1.3, -0.7)
RATE_SLOPE_STABILITY = 0.05
RATE_VIOLATIONS = 1
CONTRACTION_SLACK = 0.05


@dataclass
class RunResult:
    metrics: Dict[str, float] = field(default_factory=dict)
    checks: Dict[str, bool] = field(default_factory=dict)
    records: Dict[str, RunRecord] = field(default_factory=dict)
    grid: Optional[GridResult] = None
    tables: Dict[str, Callable[[str], str]] = field(default_factory=dict)

    @property
    def completed(self) -> bool:
        return all(record.completed for record in self.records.values())

    def problems(self) -> List[str]:
        return [f"{name}: {record.message}" for name, record in self.records.items()
                if not record.completed]


def build_data(cfg: ExperimentConfig, rngs) -> SplitDataset:
    """Generate or load the dataset of an experiment and split it."""
    data = cfg.data
    if data.kind == "correlated":
        ds = gen_correlated(data.n_base, data.n_total, data.noise_sd, data.n_samples, rngs["data"])
    elif data.kind == "spline":
        ds = gen_spline(data.n_points, rngs["data"])
    elif data.kind == "blobs":
        ds = gen_blobs(data.n_classes, data.n_samples, data.sep, data.label_noise, rngs["data"])
    elif data.kind == "shift_patterns":
        ds = gen_shift_patterns(data.n_classes, data.n_samples, data.length, data.max_shift,
                                data.pattern_noise, rngs["data"])
    elif data.kind == "diabetes":
        ds = load_diabetes(data.standardize, data.standardize_target)
    elif data.kind == "csv":
        ds = load_csv(data.path, data.target_column, data.standardize, data.standardize_target)
    else:
        raise DatasetError(f"Data kind '{data.kind}' cannot be split")
    return split(ds, data.fractions, rngs["split"])


def last(record: RunRecord, name: str) -> float:
    """Final value of a trace column, NaN for an empty trace."""
    return float(record.final.get(name, np.nan))


def relative_gap(value: float, reference: float) -> float:
    return float((value - reference) / reference)


# ---------------------------------------------------------------------------
# Linear experiments
# ---------------------------------------------------------------------------

def run_l2(cfg: ExperimentConfig, log: Callable[[str], None]) -> RunResult:
    rngs = spawn_rngs(cfg.seed, DATA_STREAMS)
    data = build_data(cfg, rngs)
    log(f"Correlated features: {len(data.train)}/{len(data.reg)}/{len(data.test)} rows, "
        f"{data.train.n_features} columns")
    model = LinearReparam.random(data.train.n_features, rngs["model"], cfg.model.rho_init,
                                 0.0 if cfg.model.bias else None)
    record = train_l2(model, data, cfg.train, message_callback=log)
    result = RunResult(records={"trace": record})
    result.metrics.update({
        "xreg_val_mse": last(record, "reg_loss"),
        "xreg_test_mse": last(record, "test_metric"),
        "rho": model.rho,
    })
    if cfg.oracle:
        grid = ridge_grid(data)
        w_oracle = grid.best_weights
        weight_err = float(np.linalg.norm(model.weights() - w_oracle) / np.linalg.norm(w_oracle))
        gap = relative_gap(last(record, "reg_loss"), grid.best_loss)
        result.grid = grid
        result.metrics.update({
            "oracle_val_mse": grid.best_loss,
            "oracle_lambda": grid.best_lambda,
            "oracle_norm": float(np.linalg.norm(w_oracle)),
            "relative_gap": gap,
            "weight_rel_err": weight_err,
        })
        result.checks.update({
            "val_mse_matches_oracle": abs(gap) <= L2_GAP,
            "weights_match_oracle": weight_err <= L2_WEIGHT_ERR,
        })
    return result


def run_l1(cfg: ExperimentConfig, log: Callable[[str], None]) -> RunResult:
    rngs = spawn_rngs(cfg.seed, DATA_STREAMS)
    data = build_data(cfg, rngs)
    log(f"Tabular data: {len(data.train)}/{len(data.reg)}/{len(data.test)} rows, "
        f"{data.train.n_features} features")
    model = LinearModel.zeros(data.train.n_features, cfg.model.bias)
    record = train_projected(model, data, cfg.train, "l1", message_callback=log)
    result = RunResult(records={"trace": record})
    result.metrics.update({
        "xreg_val_mse": last(record, "reg_loss"),
        "xreg_test_mse": last(record, "test_metric"),
        "l1_norm": float(np.abs(model.w).sum()),
        "nnz": int(np.count_nonzero(model.w)),
    })
    if cfg.oracle:
        grid = lasso_grid(data)
        w_oracle = grid.best_weights
        y = data.train.y
        threshold = L1_SIGN_SHARE * float(y.max() - y.min())
        large = np.abs(w_oracle) > threshold
        signs_agree = bool(np.all(np.sign(model.w[large]) == np.sign(w_oracle[large])))
        gap = relative_gap(last(record, "reg_loss"), grid.best_loss)
        result.grid = grid
        result.metrics.update({
            "oracle_val_mse": grid.best_loss,
            "oracle_lambda": grid.best_lambda,
            "oracle_nnz": int(np.count_nonzero(w_oracle)),
            "relative_gap": gap,
            "sign_checked": int(large.sum()),
        })
        result.checks.update({
            "val_mse_matches_oracle": abs(gap) <= L1_GAP,
            "signs_match_oracle": signs_agree,
        })
    return result


def run_spline(cfg: ExperimentConfig, log: Callable[[str], None]) -> RunResult:
    rngs = spawn_rngs(cfg.seed, DATA_STREAMS)
    data = build_data(cfg, rngs)
    model = SplineModel.create(cfg.model.knots)
    log(f"Spline data: {len(data.train)} training points, {model.n_basis} basis functions")
    record = train_projected(model, data, cfg.train, "deriv_norm", message_callback=log)
    result = RunResult(records={"trace": record})
    result.metrics.update({
        "xreg_val_mse": last(record, "reg_loss"),
        "xreg_test_mse": last(record, "test_metric"),
        "deriv_norm_sq": model.penalty(),
    })
    if cfg.oracle:
        grid = spline_grid(data, cfg.model.knots)
        gap = relative_gap(last(record, "reg_loss"), grid.best_loss)
        result.grid = grid
        result.metrics.update({
            "oracle_val_mse": grid.best_loss,
            "oracle_lambda": grid.best_lambda,
            "relative_gap": gap,
        })
        result.checks["val_mse_matches_oracle"] = abs(gap) <= SPLINE_GAP
    return result


# ---------------------------------------------------------------------------
# Noisy networks
# ---------------------------------------------------------------------------

def build_mlp(cfg: ExperimentConfig, data: SplitDataset, model_seed: int,
              log_sigma: float) -> NoisyMlp:
    """Network for the data; equal model seeds give equal initial weights."""
    task = data.train.task
    out = data.train.n_classes if task == "classification" else 1
    sizes = [data.train.n_features, *cfg.model.hidden, out]
    return NoisyMlp.create(sizes, make_rng(model_seed), log_sigma, task)


def _model_seed(rngs) -> int:
    return int(rngs["model"].integers(0, 2 ** 63))


def _xreg_log_sigma(cfg: ExperimentConfig) -> float:
    return cfg.train.log_sigma_init if cfg.model.noise else -np.inf


def _baseline(cfg: ExperimentConfig, data: SplitDataset, model_seed: int, log):
    """Same network with the noise scale frozen at model.baseline_sigma."""
    sigma = cfg.model.baseline_sigma
    log_sigma = float(np.log(sigma)) if sigma > 0 else -np.inf
    model = build_mlp(cfg, data, model_seed, log_sigma)
    train_cfg = cfg.train.model_copy(update={"lr_rho": 0.0})
    return train_noisy(model, data, train_cfg, message_callback=log), model


def _noisy_summary(result: RunResult, cfg: ExperimentConfig, xreg: RunRecord,
                   baseline: RunRecord, model: NoisyMlp):
    sigmas = model.sigmas
    result.metrics.update({
        "xreg_test_acc": last(xreg, "test_metric"),
        "baseline_test_acc": last(baseline, "test_metric"),
        "acc_diff": last(xreg, "test_metric") - last(baseline, "test_metric"),
        "xreg_gen_gap": last(xreg, "gen_gap"),
        "baseline_gen_gap": last(baseline, "gen_gap"),
        "sigma_max": float(sigmas.max()),
        "sigma_sum": float(sigmas.sum()),
        "reg_overhead": xreg.counters["reg_overhead"],
        "cross_reads": xreg.isolation["cross_reads"] + baseline.isolation["cross_reads"],
    })
    for i, s in enumerate(sigmas):
        result.metrics[f"sigma_{i}"] = float(s)


def run_noise_mlp(cfg: ExperimentConfig, log: Callable[[str], None]) -> RunResult:
    rngs = spawn_rngs(cfg.seed, DATA_STREAMS)
    data = build_data(cfg, rngs)
    model_seed = _model_seed(rngs)
    model = build_mlp(cfg, data, model_seed, _xreg_log_sigma(cfg))
    log(f"Noisy network {[data.train.n_features, *cfg.model.hidden]}: "
        f"{len(data.train)} training and {len(data.reg)} regularization rows")
    xreg = train_noisy(model, data, cfg.train, message_callback=log)
    log("Training the fixed-noise baseline")
    baseline, _ = _baseline(cfg, data, model_seed, log)

    result = RunResult(records={"trace": xreg, "baseline": baseline})
    _noisy_summary(result, cfg, xreg, baseline, model)
    init_sigma = float(np.exp(cfg.train.log_sigma_init))
    result.checks.update({
        "accuracy_not_below_baseline": result.metrics["acc_diff"] >= 0,
        "sigma_rose": bool(cfg.model.noise and result.metrics["sigma_max"] > SIGMA_RISE * init_sigma),
        "data_isolated": result.metrics["cross_reads"] == 0,
    })
    return result


def perfectly_calibrated(n: int, n_classes: int, rng: np.random.Generator,
                         levels=(0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)):
    """
    Predictions whose confidence c is right for exactly a share c of the
    samples at that confidence level.
    """
    per_level = n // len(levels)
    probs, labels = [], []
    for c in levels:
        rest = (1.0 - c) / (n_classes - 1)
        block = np.full((per_level, n_classes), rest)
        predicted = rng.integers(0, n_classes, size=per_level)
        block[np.arange(per_level), predicted] = c
        n_right = int(round(c * per_level))
        wrong = (predicted + rng.integers(1, n_classes, size=per_level)) % n_classes
        truth = np.where(np.arange(per_level) < n_right, predicted, wrong)
        probs.append(block)
        labels.append(truth)
    return np.vstack(probs), np.concatenate(labels)


def run_calibrate(cfg: ExperimentConfig, log: Callable[[str], None]) -> RunResult:
    rngs = spawn_rngs(cfg.seed, DATA_STREAMS)
    data = build_data(cfg, rngs)
    model_seed = _model_seed(rngs)
    model = build_mlp(cfg, data, model_seed, _xreg_log_sigma(cfg))
    xreg = train_noisy(model, data, cfg.train, message_callback=log)
    log(f"Training the baseline with fixed sigma {cfg.model.baseline_sigma}")
    baseline, baseline_model = _baseline(cfg, data, model_seed, log)

    report = ece(softmax(mlp_forward(model, data.test.X)[0]), data.test.y)
    baseline_report = ece(softmax(mlp_forward(baseline_model, data.test.X)[0]), data.test.y)
    ref_probs, ref_labels = perfectly_calibrated(10_000, data.train.n_classes, rngs["theory"])
    reference = ece(ref_probs, ref_labels).ece

    result = RunResult(records={"trace": xreg, "baseline": baseline})
    _noisy_summary(result, cfg, xreg, baseline, model)
    result.metrics.update({
        "xreg_ece": report.ece,
        "baseline_ece": baseline_report.ece,
        "calibrated_reference_ece": reference,
    })
    result.tables["calibration.csv"] = report.to_csv_text
    result.tables["calibration_baseline.csv"] = baseline_report.to_csv_text
    result.checks.update({
        "ece_not_above_baseline": report.ece <= baseline_report.ece,
        "calibrated_reference": reference < CALIBRATED_ECE,
        "data_isolated": result.metrics["cross_reads"] == 0,
    })
    return result


def run_growth(cfg: ExperimentConfig, log: Callable[[str], None]) -> RunResult:
    rngs = spawn_rngs(cfg.seed, DATA_STREAMS)
    full = build_data(cfg, rngs)
    small = subsample_train(full, cfg.data.small_fraction, rngs["subsample"])
    log(f"Data growth: {len(small.train)} rows until epoch {cfg.transition_epoch}, "
        f"then {len(full.train)}")
    model = build_mlp(cfg, full, _model_seed(rngs), _xreg_log_sigma(cfg))
    record = train_growth(model, small, full, cfg.transition_epoch, cfg.train, message_callback=log)

    result = RunResult(records={"trace": record})
    t = cfg.transition_epoch
    window = min(GROWTH_WINDOW, t, cfg.train.epochs - t)
    sigma_sum = record.column("sigma_sum")
    metric = record.column("test_metric")
    result.metrics.update({
        "final_test_acc": last(record, "test_metric"),
        "transition_epoch": t,
        "window": window,
    })
    if window > 0 and len(sigma_sum) >= t + window:
        before, after = sigma_sum[t - window:t].mean(), sigma_sum[t:t + window].mean()
        metric_before, metric_after = metric[t - window:t].mean(), metric[t:t + window].mean()
        result.metrics.update({
            "sigma_sum_before": float(before),
            "sigma_sum_after": float(after),
            "test_acc_before": float(metric_before),
            "test_acc_after": float(metric_after),
        })
        result.checks.update({
            "sigma_sum_drops_after_growth": bool(after < before),
            "test_acc_holds_after_growth": bool(metric_after >= metric_before - GROWTH_METRIC_DROP),
        })
    return result


def run_augment(cfg: ExperimentConfig, log: Callable[[str], None]) -> RunResult:
    rngs = spawn_rngs(cfg.seed, DATA_STREAMS)
    data = build_data(cfg, rngs)
    model_seed = _model_seed(rngs)
    alpha_max = cfg.train.alpha_max or data.train.n_features / 2.0
    augment = AugmentParams(min(cfg.train.alpha_init, alpha_max), alpha_max)
    model = build_mlp(cfg, data, model_seed, _xreg_log_sigma(cfg))
    xreg = train_noisy(model, data, cfg.train, augment=augment, message_callback=log)
    log("Training the no-augmentation baseline")
    baseline_model = build_mlp(cfg, data, model_seed, _xreg_log_sigma(cfg))
    baseline_cfg = cfg.train.model_copy(update={"lr_rho": 0.0})
    baseline = train_noisy(baseline_model, data, baseline_cfg, message_callback=log)

    result = RunResult(records={"trace": xreg, "baseline": baseline})
    result.metrics.update({
        "alpha": augment.alpha,
        "alpha_max": alpha_max,
        "xreg_test_acc": last(xreg, "test_metric"),
        "baseline_test_acc": last(baseline, "test_metric"),
        "acc_diff": last(xreg, "test_metric") - last(baseline, "test_metric"),
        "cross_reads": xreg.isolation["cross_reads"] + baseline.isolation["cross_reads"],
    })
    result.checks.update({
        "alpha_interior": 0.0 < augment.alpha < alpha_max,
        "accuracy_not_below_baseline": result.metrics["acc_diff"] >= 0,
        "data_isolated": result.metrics["cross_reads"] == 0,
    })
    return result


# ---------------------------------------------------------------------------
# Theory checks
# ---------------------------------------------------------------------------

def run_gaussian(cfg: ExperimentConfig, log: Callable[[str], None]) -> RunResult:
    (x_t, y_t), (x_v, y_v) = cfg.data.train_pair, cfg.data.reg_pair
    if x_t == 0:
        raise ConfigError(["data.train_pair: x must be non-zero"])
    train = Dataset([[x_t]], [y_t])
    reg = Dataset([[x_v]], [y_v])
    data = SplitDataset(train, reg, reg, (1 / 3, 1 / 3, 1 / 3))
    model = GaussianUnivariate(cfg.model.w_init, cfg.model.sigma_init)
    record = train_gaussian(model, data, cfg.train)

    w_star = y_t / x_t
    sigma_star = abs(y_v - w_star * x_v)
    log(f"Closed form: w* = {w_star:.6g}, sigma* = {sigma_star:.6g}")
    result = RunResult(records={"trace": record})
    result.metrics.update({
        "w": model.w,
        "sigma": model.sigma,
        "w_star": w_star,
        "sigma_star": sigma_star,
        "sigma_rel_err": abs(model.sigma - sigma_star) / sigma_star,
    })
    result.checks.update({
        "sigma_matches_closed_form": result.metrics["sigma_rel_err"] <= GAUSSIAN_TOL,
        "w_matches_closed_form": abs(model.w - w_star) <= GAUSSIAN_TOL * max(1.0, abs(w_star)),
    })
    return result


def run_stat_rate(cfg: ExperimentConfig, log: Callable[[str], None]) -> RunResult:
    theory = cfg.theory
    fit = stat_rate_sweep(theory.sizes, theory.repeats, cfg.seed, theory.rate_steps)
    doubled = stat_rate_sweep(theory.sizes, 2 * theory.repeats, cfg.seed, theory.rate_steps)
    log(f"Log-log slope {fit.slope:.4f} with {theory.repeats} repeats, "
        f"{doubled.slope:.4f} with {2 * theory.repeats}")
    result = RunResult()
    result.metrics.update({
        "slope": fit.slope,
        "slope_doubled_repeats": doubled.slope,
        "violations": fit.violations,
    })
    lines = ["size,sq_error"] + [f"{int(m)},{e:.17g}" for m, e in zip(fit.sizes, fit.errors)]
    result.tables["rate.csv"] = lambda header="": (f"# {header}\n" if header else "") + "\n".join(lines) + "\n"
    result.checks.update({
        "slope_in_range": RATE_SLOPE[0] <= fit.slope <= RATE_SLOPE[1],
        "slope_stable": abs(doubled.slope - fit.slope) < RATE_SLOPE_STABILITY,
        "errors_decrease": fit.violations <= RATE_VIOLATIONS,
    })
    return result


def run_convergence(cfg: ExperimentConfig, log: Callable[[str], None]) -> RunResult:
    theory = cfg.theory
    rng = spawn_rngs(cfg.seed, DATA_STREAMS)["theory"]
    problem = CoupledQuadratic.random(theory.dim_theta, theory.dim_rho, rng, theory.mu,
                                      theory.alpha, theory.beta, theory.coupling)
    eta_theta, eta_rho, kappa = problem.step_sizes()
    errors = alternate_quadratic(problem, theory.steps, rng, eta_theta, eta_rho)
    contraction = measure_convergence(errors)
    tail = errors[theory.monotone_after:]
    log(f"Measured contraction {contraction:.6f}; bound 1 - kappa = {1 - kappa:.6f}")
    result = RunResult()
    result.metrics.update({
        "contraction": contraction,
        "kappa": kappa,
        "bound": 1.0 - kappa + CONTRACTION_SLACK,
        "eta_theta": eta_theta,
        "eta_rho": eta_rho,
        "final_error": float(errors[-1]),
    })
    lines = ["step,error"] + [f"{i},{e:.17g}" for i, e in enumerate(errors)]
    result.tables["convergence.csv"] = lambda header="": (f"# {header}\n" if header else "") + "\n".join(lines) + "\n"
    result.checks.update({
        "contraction_within_bound": contraction <= 1.0 - kappa + CONTRACTION_SLACK,
        "error_monotone": bool(np.all(np.diff(tail) <= 0)),
    })
    return result


RUNNERS: Dict[str, Callable[[ExperimentConfig, Callable[[str], None]], RunResult]] = {
    "l2": run_l2,
    "l1": run_l1,
    "spline": run_spline,
    "noise-mlp": run_noise_mlp,
    "calibrate": run_calibrate,
    "growth": run_growth,
    "augment": run_augment,
    "gaussian": run_gaussian,
    "stat-rate": run_stat_rate,
    "convergence": run_convergence,
}


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def _write_record(run_dir, name: str, record: RunRecord, cfg: ExperimentConfig, cfg_hash: str):
    stem = "trace" if name == "trace" else f"trace_{name}"
    if cfg.format == "json":
        text = record.to_json_text(config_hash=cfg_hash, experiment=cfg.experiment)
        write_atomic(run_dir / f"{stem}.json", text)
    else:
        write_atomic(run_dir / f"{stem}.csv", record.to_csv_text(artifact_header(cfg_hash, cfg.seed)))


def execute_run(cfg: ExperimentConfig, sweep_point: Optional[str] = None,
                echo: bool = True) -> Dict:
    """
    Run one experiment for one seed and write its artifacts.

    Returns the summary that is also written to summary.json.
    """
    run_dir = run_folder(cfg.out_dir, cfg.experiment, cfg.seed, sweep_point)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(cfg)
    header = artifact_header(cfg_hash, cfg.seed)
    logger = RunLogger(run_dir / LOG_NAME, cfg.experiment, cfg.seed, sweep_point, echo=echo)
    logger.log(f"Experiment {cfg.experiment} started, seed {cfg.seed}, config hash {cfg_hash}")
    logger.log(f"Results folder: {run_dir}")
    write_config(run_dir / CONFIG_NAME, cfg)

    summary = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "config_hash": cfg_hash,
        "status": "completed",
        "message": "",
        "warnings": [],
        "metrics": {},
        "checks": {},
    }
    try:
        with logger.in_phase("train"):
            result = RUNNERS[cfg.experiment](cfg, logger.log)
    except (DatasetError, ConfigError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.log(f"Run failed: {exc}")
        summary.update({"status": "failed", "message": str(exc), "passed": False})
        write_json(run_dir / SUMMARY_NAME, summary)
        return summary

    with logger.in_phase("artifacts"):
        wall_time = {}
        for name, record in result.records.items():
            _write_record(run_dir, name, record, cfg, cfg_hash)
            summary["warnings"].extend(record.warnings)
            wall_time[name] = record.wall_time
            logger.log(f"Trace {name}: {len(record.rows)} epochs in {record.wall_time:.2f}s")
        if result.grid is not None:
            write_atomic(run_dir / "grid.csv", result.grid.to_csv_text(header))
        for filename, render in result.tables.items():
            write_atomic(run_dir / filename, render(header))
    summary["wall_time"] = wall_time

    if not result.completed:
        summary["status"] = "aborted"
        summary["message"] = "; ".join(result.problems())
        logger.log(f"Run aborted: {summary['message']}")
    checks = result.checks if cfg.checks else {}
    summary["metrics"] = result.metrics
    summary["checks"] = checks
    summary["passed"] = result.completed and all(checks.values())
    with logger.in_phase("checks"):
        for name, ok in checks.items():
            logger.log(f"Check {name}: {'passed' if ok else 'FAILED'}")
    logger.log(f"Experiment {cfg.experiment} finished with status {summary['status']}")
    write_json(run_dir / SUMMARY_NAME, summary)
    return summary


def execute_job(job) -> Dict:
    """Process-pool entry point: job is (config dict, sweep point, echo)."""
    cfg_data, sweep_point, echo = job
    return execute_run(ExperimentConfig.model_validate(cfg_data), sweep_point, echo)


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------

# Share of seeds on which a check must pass in a multi-seed run
PASS_SHARE = 0.8


@dataclass
class BatchResult:
    summaries: List[Dict]
    pass_shares: Dict[str, float]
    passed: bool

    @property
    def completed(self) -> bool:
        return all(s["status"] == "completed" for s in self.summaries)


def aggregate_checks(summaries: List[Dict]) -> BatchResult:
    """
    Combine per-seed summaries. A check passes when it passed on at least
    PASS_SHARE of the seeds; a failed or aborted seed fails the batch.
    """
    names: List[str] = []
    for summary in summaries:
        names.extend(name for name in summary.get("checks", {}) if name not in names)
    shares = {
        name: float(np.mean([bool(s.get("checks", {}).get(name, False)) for s in summaries]))
        for name in names
    }
    completed = all(s["status"] == "completed" for s in summaries)
    passed = bool(summaries) and completed and all(v >= PASS_SHARE for v in shares.values())
    return BatchResult(summaries, shares, passed)


def seed_jobs(cfg: ExperimentConfig, sweep_point: Optional[str] = None, echo: bool = True):
    return [(with_seed(cfg, seed).model_dump(mode="json"), sweep_point, echo)
            for seed in run_seeds(cfg.seed, cfg.n_seeds)]


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None,
                   progress_callback=None) -> BatchResult:
    """Run cfg.n_seeds seeds of one experiment on the worker pool."""
    workers = max_workers() if workers is None else workers
    jobs = seed_jobs(cfg, echo=workers <= 1 or cfg.n_seeds == 1)
    batch = aggregate_checks(run_jobs(execute_job, jobs, workers, progress_callback))
    if cfg.n_seeds > 1:
        write_json(Path(cfg.out_dir) / cfg.experiment / SEEDS_NAME, {
            "experiment": cfg.experiment,
            "root_seed": cfg.seed,
            "seeds": [s["seed"] for s in batch.summaries],
            "config_hash": config_hash(cfg),
            "pass_shares": batch.pass_shares,
            "passed": batch.passed,
        })
    return batch
