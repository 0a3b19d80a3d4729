"""Full-size runs of the default experiment configs. Deselected by default; run with -m slow."""

import pytest

from src.experiments import PASS_SHARE, load_config, run_experiment, run_sweep
from src.experiments.sweep import MATCHED_VALUES, value_label

pytestmark = pytest.mark.slow

NOISY_SEEDS = 10
SWEEP_SEEDS = 5


@pytest.mark.parametrize("experiment", ["l2", "l1", "spline", "gaussian", "stat-rate", "convergence"])
def test_default_config_passes(experiment, tmp_path):
    cfg = load_config(experiment, overrides={"seed": 1, "out_dir": str(tmp_path)})
    batch = run_experiment(cfg, workers=1)
    failed = {k: v for k, v in batch.pass_shares.items() if v < 1.0}
    assert batch.passed, failed


@pytest.mark.parametrize("experiment", ["noise-mlp", "calibrate", "augment", "growth"])
def test_noisy_network_over_seeds(experiment, tmp_path):
    cfg = load_config(experiment, overrides={"seed": 1, "n_seeds": NOISY_SEEDS,
                                             "out_dir": str(tmp_path)})
    batch = run_experiment(cfg)
    assert batch.completed
    assert all(share >= PASS_SHARE for share in batch.pass_shares.values()), batch.pass_shares
    assert batch.passed
    assert (tmp_path / experiment / "seeds_summary.json").exists()


@pytest.mark.parametrize("param", sorted(MATCHED_VALUES))
def test_cheap_setting_matches_reference(param, tmp_path):
    cheap, reference, _ = MATCHED_VALUES[param]
    cfg = load_config("sweep", overrides={
        "seed": 1, "n_seeds": SWEEP_SEEDS, "out_dir": str(tmp_path),
        "sweep": {"param": param, "values": [cheap, reference]},
    })
    result = run_sweep(cfg)
    assert result.checks["all_runs_completed"]
    matched = f"{param}_{value_label(cheap)}_matches_{value_label(reference)}"
    assert result.checks[matched], result.table
    assert len(result.summaries) == 2 * SWEEP_SEEDS
