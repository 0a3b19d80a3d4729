"""
Experiments - Configuration
Validated experiment configuration. Values come from three layers, later
ones winning key by key:

1. the per-experiment defaults in DEFAULT_CONFIGS
2. an optional YAML file
3. command-line flags

Schema violations raise ConfigError; when the offending key came from the
YAML file the message names its line.
"""

import copy
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..optim import TrainConfig

EXPERIMENTS = (
    "l2", "l1", "spline", "noise-mlp", "calibrate", "growth", "augment", "sweep",
    "gaussian", "stat-rate", "convergence",
)

# Experiments that can be swept
SWEEPABLE = ("noise-mlp", "calibrate", "augment")

FRACTION_TOL = 1e-9


class ConfigError(ValueError):
    """The experiment configuration does not match the schema."""

    def __init__(self, problems: List[str], source: Optional[str] = None):
        self.problems = problems
        where = f" in {source}" if source else ""
        super().__init__(f"Invalid configuration{where}:\n  " + "\n  ".join(problems))


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class DataConfig(_Section):
    kind: Literal["correlated", "spline", "blobs", "shift_patterns", "diabetes", "csv",
                  "gaussian_pair"] = "blobs"
    fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    n_samples: int = Field(4000, ge=3)

    # correlated features
    n_base: int = Field(5, ge=1)
    n_total: int = Field(100, ge=1)
    noise_sd: float = Field(0.1, ge=0)

    # spline
    n_points: int = Field(20, ge=4)

    # blobs and shift patterns
    n_classes: int = Field(4, ge=2)
    sep: float = Field(3.0, gt=0)
    label_noise: float = Field(0.2, ge=0, lt=1)
    length: int = Field(16, ge=2)
    max_shift: int = Field(3, ge=0)
    pattern_noise: float = Field(0.3, ge=0)

    # tabular files
    path: Optional[str] = None
    target_column: str = "target"
    standardize: bool = True
    standardize_target: bool = True

    # data growth: share of the training partition used before the switch
    small_fraction: float = Field(0.2, gt=0, le=1)

    # univariate Gaussian: (x, y) of the training and regularization pairs
    train_pair: Tuple[float, float] = (1.0, 1.0)
    reg_pair: Tuple[float, float] = (1.0, 3.0)

    @field_validator("fractions")
    @classmethod
    def _fractions_sum_to_one(cls, value):
        if any(f <= 0 for f in value):
            raise ValueError("fractions must be positive")
        if abs(sum(value) - 1.0) > FRACTION_TOL:
            raise ValueError(f"fractions must sum to 1, got {sum(value)}")
        return value


class ModelConfig(_Section):
    hidden: List[int] = Field(default_factory=lambda: [64, 64, 64])
    noise: bool = True
    # Fixed noise scale of the baseline network; 0 disables its noise
    baseline_sigma: float = Field(0.0, ge=0)
    rho_init: float = Field(1.0, gt=0)
    bias: bool = False
    knots: int = Field(15, ge=2)
    w_init: float = 0.0
    sigma_init: float = Field(1.0, gt=0)


class TheoryConfig(_Section):
    # coupled quadratic
    dim_theta: int = Field(4, ge=1)
    dim_rho: int = Field(2, ge=1)
    mu: float = Field(1.0, gt=0)
    alpha: float = Field(1.0, gt=0)
    beta: float = Field(4.0, gt=0)
    coupling: float = Field(0.1, ge=0, lt=1)
    steps: int = Field(2000, ge=20)
    monotone_after: int = Field(10, ge=0)
    # statistical rate
    sizes: List[int] = Field(default_factory=lambda: [8, 16, 32, 64, 128, 256, 512])
    repeats: int = Field(200, ge=30)
    rate_steps: int = Field(1000, ge=1)

    @model_validator(mode="after")
    def _check_spectrum(self):
        if self.beta < max(self.mu, self.alpha):
            raise ValueError("beta must be at least mu and alpha")
        return self


class SweepConfig(_Section):
    param: str = "mc_samples"
    values: List[float] = Field(default_factory=lambda: [1, 3, 5, 10])
    base: Literal["noise-mlp", "calibrate", "augment"] = "noise-mlp"

    @field_validator("values")
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("a sweep needs at least one value")
        return value

    @field_validator("param")
    @classmethod
    def _known_param(cls, value):
        if value != "reg_fraction" and value not in TrainConfig.model_fields:
            raise ValueError(
                f"unknown sweep parameter '{value}'; use reg_fraction or a train setting"
            )
        return value


class ExperimentConfig(_Section):
    experiment: Literal[EXPERIMENTS]
    seed: int
    n_seeds: int = Field(1, ge=1)
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    theory: TheoryConfig = TheoryConfig()
    oracle: bool = True
    checks: bool = True
    out_dir: str = "results"
    format: Literal["csv", "json"] = "csv"
    sweep: Optional[SweepConfig] = None
    transition_epoch: int = Field(30, ge=0)

    @model_validator(mode="after")
    def _check_references(self):
        if self.experiment == "sweep" and self.sweep is None:
            raise ValueError("the sweep experiment needs a sweep section")
        if self.data.kind == "csv":
            if not self.data.path:
                raise ValueError("data.path is required for CSV data")
            if not Path(self.data.path).exists():
                raise ValueError(f"data file not found: {self.data.path}")
        if self.experiment == "growth" and self.transition_epoch > self.train.epochs:
            raise ValueError(
                f"transition_epoch ({self.transition_epoch}) is after the last epoch ({self.train.epochs})"
            )
        return self


_NOISY_DATA = {"kind": "blobs", "n_classes": 4, "n_samples": 4000, "sep": 3.0,
               "label_noise": 0.2, "fractions": (0.7, 0.1, 0.2)}
_NOISY_TRAIN = {"optimizer": "adam", "lr_theta": 3e-3, "lr_rho": 0.1, "batch_size": 128,
                "epochs": 60, "mc_samples": 3, "reg_interval": 30, "log_sigma_init": -3.0}

DEFAULT_CONFIGS: Dict[str, Dict[str, Any]] = {
    "l2": {
        "data": {"kind": "correlated", "n_base": 5, "n_total": 100, "noise_sd": 0.1,
                 "n_samples": 200, "fractions": (0.7, 0.15, 0.15)},
        "model": {"rho_init": 1.0, "bias": False},
        "train": {"optimizer": "momentum", "momentum": 0.99, "lr_theta": 0.01, "lr_rho": 0.01,
                  "epochs": 6000, "batch_size": 512, "reg_interval": 1, "reg_start_step": 3000},
    },
    "l1": {
        "data": {"kind": "diabetes", "standardize": True, "standardize_target": True,
                 "fractions": (0.75, 0.2, 0.05)},
        "train": {"optimizer": "momentum", "momentum": 0.99, "lr_theta": 5e-4, "lr_rho": 0.01,
                  "epochs": 2000, "batch_size": 512, "reg_interval": 1},
    },
    "spline": {
        "data": {"kind": "spline", "n_points": 20, "fractions": (0.5, 0.3, 0.2)},
        "model": {"knots": 15},
        "train": {"optimizer": "sgd", "lr_theta": 0.3, "lr_rho": 0.3, "epochs": 8000,
                  "batch_size": 512, "reg_interval": 1},
    },
    "noise-mlp": {
        "data": dict(_NOISY_DATA),
        "model": {"hidden": [64, 64, 64], "baseline_sigma": 0.0},
        "train": dict(_NOISY_TRAIN),
    },
    "calibrate": {
        "data": dict(_NOISY_DATA),
        "model": {"hidden": [64, 64, 64], "baseline_sigma": 0.5},
        "train": dict(_NOISY_TRAIN),
    },
    "growth": {
        "data": {**_NOISY_DATA, "small_fraction": 0.2},
        "model": {"hidden": [64, 64, 64]},
        "train": {**_NOISY_TRAIN, "batch_size": 64, "reg_interval": 10},
        "transition_epoch": 30,
    },
    "augment": {
        "data": {"kind": "shift_patterns", "n_classes": 4, "n_samples": 600, "length": 16,
                 "max_shift": 3, "pattern_noise": 0.3, "fractions": (0.3, 0.2, 0.5)},
        "model": {"hidden": [64, 64], "noise": False},
        "train": {"optimizer": "adam", "lr_theta": 3e-3, "lr_rho": 0.05, "batch_size": 32,
                  "epochs": 100, "mc_samples": 3, "reg_interval": 5,
                  "alpha_init": 1.0, "alpha_max": 8.0},
    },
    "sweep": {
        "data": dict(_NOISY_DATA),
        "model": {"hidden": [64, 64, 64]},
        "train": dict(_NOISY_TRAIN),
        "n_seeds": 5,
        "sweep": {"param": "mc_samples", "values": [1, 3, 5, 10], "base": "noise-mlp"},
    },
    "gaussian": {
        "data": {"kind": "gaussian_pair", "train_pair": (1.0, 1.0), "reg_pair": (1.0, 3.0)},
        "model": {"w_init": 0.0, "sigma_init": 1.0},
        "train": {"optimizer": "sgd", "lr_theta": 0.1, "lr_rho": 0.1, "epochs": 2000,
                  "reg_interval": 1},
    },
    "stat-rate": {
        "theory": {"sizes": [8, 16, 32, 64, 128, 256, 512], "repeats": 200, "rate_steps": 1000},
    },
    "convergence": {
        "theory": {"dim_theta": 4, "dim_rho": 2, "mu": 1.0, "alpha": 1.0, "beta": 4.0,
                   "coupling": 0.1, "steps": 2000, "monotone_after": 10},
    },
}


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; override wins, nested dicts merge key by key."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _key_lines(node, prefix=()) -> Dict[tuple, int]:
    """1-based line of every mapping key in a composed YAML document."""
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (key_node.value,)
            lines[path] = key_node.start_mark.line + 1
            lines.update(_key_lines(value_node, path))
    return lines


def read_yaml(path) -> Tuple[Dict[str, Any], Dict[tuple, int]]:
    """Parse a YAML config file; returns the mapping and the line of every key."""
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    text = path.read_text(encoding="utf-8")
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError([f"{where}{getattr(exc, 'problem', None) or exc}"], str(path)) from None
    if data is None:
        return {}, {}
    if not isinstance(data, dict):
        raise ConfigError(["line 1: the config file must be a mapping of keys to values"], str(path))
    return data, _key_lines(node)


def _describe(error: Dict[str, Any], lines: Dict[tuple, int]) -> str:
    loc = tuple(str(part) for part in error["loc"])
    key = ".".join(loc) or "(root)"
    line = None
    for depth in range(len(loc), 0, -1):
        if loc[:depth] in lines:
            line = lines[loc[:depth]]
            break
    where = f"line {line}: " if line is not None else ""
    return f"{where}{key}: {error['msg']}"


def build_config(experiment: str, file_data: Optional[Dict[str, Any]] = None,
                 overrides: Optional[Dict[str, Any]] = None,
                 lines: Optional[Dict[tuple, int]] = None,
                 source: Optional[str] = None) -> ExperimentConfig:
    """Merge defaults, file values and overrides, then validate."""
    if experiment not in DEFAULT_CONFIGS:
        raise ConfigError([f"unknown experiment '{experiment}'; choose from {', '.join(EXPERIMENTS)}"])
    merged = deep_merge(DEFAULT_CONFIGS[experiment], file_data or {})
    merged = deep_merge(merged, overrides or {})
    merged["experiment"] = experiment
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError([_describe(e, lines or {}) for e in exc.errors()], source) from None


def load_config(experiment: str, path=None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Defaults for the experiment, then the YAML file at path, then overrides."""
    file_data, lines = read_yaml(path) if path is not None else ({}, {})
    file_data.pop("experiment", None)
    return build_config(experiment, file_data, overrides, lines, str(path) if path else None)


def with_seed(cfg: ExperimentConfig, seed: int, **changes) -> ExperimentConfig:
    """Copy of cfg for one seed; the train section gets the same seed."""
    train = cfg.train.model_copy(update={"seed": int(seed)})
    return cfg.model_copy(update={"seed": int(seed), "train": train, **changes})
