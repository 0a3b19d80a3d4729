import json
from datetime import datetime

import numpy as np
import pandas as pd
import pytest
from typer.testing import CliRunner

from src.experiments import (
    ConfigError,
    SummaryError,
    config_hash,
    execute_run,
    load_config,
    run_experiment,
    run_sweep,
    summarize,
    with_seed,
)
from src.experiments.common import RunLogger, max_workers, run_folder, write_atomic
from src.experiments.sweep import point_config
from src.numkit import child_seeds
from xreg import app


def read_csv_artifact(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# config_hash=")
    return pd.read_csv(path, comment="#")


class TestConfig:
    def test_defaults_and_overrides(self):
        cfg = load_config("l2", overrides={"seed": 4, "train": {"epochs": 7}})
        assert cfg.seed == 4
        assert cfg.train.epochs == 7
        assert cfg.train.momentum == 0.99
        assert cfg.data.kind == "correlated"

    def test_flags_win_over_file(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("seed: 1\ntrain:\n  epochs: 5\n", encoding="utf-8")
        cfg = load_config("gaussian", path, {"seed": 9})
        assert cfg.seed == 9
        assert cfg.train.epochs == 5

    def test_schema_error_names_line(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("seed: 1\ntrain:\n  lr_theta: -1\n", encoding="utf-8")
        with pytest.raises(ConfigError) as info:
            load_config("l2", path)
        assert any(p.startswith("line 3: train.lr_theta") for p in info.value.problems)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("seed: 1\ntrian:\n  epochs: 3\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="line 2: trian"):
            load_config("l2", path)

    def test_seed_is_required(self):
        with pytest.raises(ConfigError, match="seed"):
            load_config("gaussian")

    def test_unknown_experiment(self):
        with pytest.raises(ConfigError, match="unknown experiment"):
            load_config("l3", overrides={"seed": 1})

    def test_missing_data_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("l1", overrides={"seed": 1, "data": {"kind": "csv", "path": "/no/such.csv"}})

    def test_hash_ignores_seed_but_not_settings(self):
        cfg = load_config("l2", overrides={"seed": 1})
        assert config_hash(cfg) == config_hash(with_seed(cfg, 99))
        other = load_config("l2", overrides={"seed": 1, "train": {"lr_theta": 0.02}})
        assert config_hash(cfg) != config_hash(other)

    def test_sweep_point_sets_fraction(self):
        cfg = load_config("sweep", overrides={"seed": 1, "sweep": {"param": "reg_fraction",
                                                                  "values": [0.05]}})
        point = point_config(cfg, 0.05)
        assert point.experiment == "noise-mlp"
        assert point.data.fractions == pytest.approx((0.75, 0.05, 0.2))

    def test_sweep_param_must_exist(self):
        with pytest.raises(ConfigError):
            load_config("sweep", overrides={"seed": 1, "sweep": {"param": "dropout"}})


class TestCommon:
    def test_workers_env(self, monkeypatch):
        monkeypatch.setenv("XREG_WORKERS", "3")
        assert max_workers() == 3
        monkeypatch.setenv("XREG_WORKERS", "zero")
        with pytest.raises(ValueError):
            max_workers()

    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        write_atomic(tmp_path / "a" / "out.txt", "hello")
        assert (tmp_path / "a" / "out.txt").read_text() == "hello"
        assert [p.name for p in (tmp_path / "a").iterdir()] == ["out.txt"]

    def test_run_folders(self, tmp_path):
        assert run_folder(tmp_path, "l2", 3) == tmp_path / "l2" / "seed_3"
        assert run_folder(tmp_path, "sweep", 3, "sweep_mc_samples/5") == \
            tmp_path / "sweep_mc_samples" / "5" / "seed_3"

    def test_log_lines_carry_run_tag_and_phase(self, tmp_path):
        logger = RunLogger(tmp_path / "run_log.txt", "l1", 7, "reg_fraction=0.05", echo=False)
        now = datetime(2026, 10, 18, 9, 12, 3)
        assert logger.format_line("hello", 4.0, now) == (
            "[2026-10-18 09:12:03] [+    4.0s] [l1 seed=7 reg_fraction=0.05 setup] hello"
        )
        with logger.in_phase("train"):
            assert "[l1 seed=7 reg_fraction=0.05 train]" in logger.format_line("x", 0.0, now)
        assert logger.phase == "setup"


def quick_l2(tmp_path, **changes):
    overrides = {"seed": 2, "out_dir": str(tmp_path),
                 "data": {"n_samples": 80, "n_total": 15},
                 "train": {"epochs": 30, "reg_start_step": 10}}
    overrides.update(changes)
    return load_config("l2", overrides=overrides)


class TestExecuteRun:
    def test_l2_artifacts(self, tmp_path):
        cfg = with_seed(quick_l2(tmp_path), 2)
        summary = execute_run(cfg, echo=False)
        run_dir = tmp_path / "l2" / "seed_2"
        for name in ("trace.csv", "grid.csv", "summary.json", "config.yaml", "run_log.txt"):
            assert (run_dir / name).exists(), name
        trace = read_csv_artifact(run_dir / "trace.csv")
        assert len(trace) == 30
        saved = json.loads((run_dir / "summary.json").read_text())
        assert saved["config_hash"] == config_hash(cfg) == summary["config_hash"]
        assert {"xreg_val_mse", "oracle_val_mse", "relative_gap"} <= set(saved["metrics"])
        assert set(saved["checks"]) == {"val_mse_matches_oracle", "weights_match_oracle"}

    def test_rerun_reproduces_trace(self, tmp_path):
        cfg = with_seed(quick_l2(tmp_path), 2)
        execute_run(cfg, echo=False)
        first = (tmp_path / "l2" / "seed_2" / "trace.csv").read_bytes()
        execute_run(cfg, echo=False)
        assert (tmp_path / "l2" / "seed_2" / "trace.csv").read_bytes() == first

    def test_run_log_is_tagged_by_phase(self, tmp_path):
        cfg = with_seed(quick_l2(tmp_path), 2)
        execute_run(cfg, echo=False)
        text = (tmp_path / "l2" / "seed_2" / "run_log.txt").read_text(encoding="utf-8")
        for phase in ("setup", "train", "artifacts", "checks"):
            assert f"[l2 seed=2 {phase}]" in text, phase

    def test_rerun_reproduces_json_trace(self, tmp_path):
        cfg = with_seed(quick_l2(tmp_path, format="json"), 2)
        first_summary = execute_run(cfg, echo=False)
        first = (tmp_path / "l2" / "seed_2" / "trace.json").read_bytes()
        execute_run(cfg, echo=False)
        assert (tmp_path / "l2" / "seed_2" / "trace.json").read_bytes() == first
        assert set(first_summary["wall_time"]) == {"trace"}

    def test_json_format_and_no_oracle(self, tmp_path):
        cfg = with_seed(quick_l2(tmp_path, format="json", oracle=False), 2)
        summary = execute_run(cfg, echo=False)
        run_dir = tmp_path / "l2" / "seed_2"
        payload = json.loads((run_dir / "trace.json").read_text())
        assert payload["config_hash"] == summary["config_hash"]
        assert payload["seed"] == 2
        assert not (run_dir / "grid.csv").exists()
        assert summary["checks"] == {}

    def test_dataset_failure_is_recorded(self, tmp_path):
        data_file = tmp_path / "data.csv"
        data_file.write_text("a,b\n1,2\n3,4\n5,6\n", encoding="utf-8")
        cfg = load_config("l1", overrides={
            "seed": 1, "out_dir": str(tmp_path / "out"),
            "data": {"kind": "csv", "path": str(data_file), "target_column": "y"},
        })
        summary = execute_run(with_seed(cfg, 1), echo=False)
        assert summary["status"] == "failed"
        assert not summary["passed"]
        assert "Target column 'y'" in summary["message"]

    def test_gaussian_passes_its_checks(self, tmp_path):
        cfg = load_config("gaussian", overrides={"seed": 1, "out_dir": str(tmp_path)})
        summary = execute_run(with_seed(cfg, 1), echo=False)
        assert summary["passed"]
        assert summary["metrics"]["sigma"] == pytest.approx(2.0, rel=1e-2)

    def test_convergence_within_bound(self, tmp_path):
        cfg = load_config("convergence", overrides={"seed": 3, "out_dir": str(tmp_path)})
        summary = execute_run(with_seed(cfg, 3), echo=False)
        assert summary["checks"]["contraction_within_bound"]
        table = read_csv_artifact(tmp_path / "convergence" / "seed_3" / "convergence.csv")
        assert len(table) == cfg.theory.steps + 1


class TestBatches:
    def test_multi_seed_uses_child_seeds(self, tmp_path):
        cfg = load_config("gaussian", overrides={"seed": 5, "n_seeds": 2, "out_dir": str(tmp_path)})
        batch = run_experiment(cfg, workers=1)
        assert [s["seed"] for s in batch.summaries] == child_seeds(5, 2)
        assert batch.passed
        seeds = json.loads((tmp_path / "gaussian" / "seeds_summary.json").read_text())
        assert seeds["pass_shares"]["sigma_matches_closed_form"] == 1.0

    def test_sweep_writes_one_run_per_value(self, tmp_path):
        cfg = load_config("sweep", overrides={
            "seed": 1, "n_seeds": 1, "out_dir": str(tmp_path),
            "data": {"n_samples": 200},
            "model": {"hidden": [6]},
            "train": {"epochs": 1, "batch_size": 32, "reg_interval": 2},
            "sweep": {"param": "mc_samples", "values": [1, 2]},
        })
        result = run_sweep(cfg, workers=1)
        assert len(result.table) == 2
        assert (tmp_path / "sweep_mc_samples" / "1" / "seed_1" / "trace.csv").exists()
        assert (tmp_path / "sweep_mc_samples" / "2" / "seed_1" / "trace.csv").exists()
        table = read_csv_artifact(tmp_path / "sweep_mc_samples" / "sweep_summary.csv")
        assert list(table["mc_samples"]) == [1.0, 2.0]
        assert result.checks["all_runs_completed"]


def write_summary(path, cfg_hash, metrics):
    path.mkdir(parents=True)
    (path / "summary.json").write_text(json.dumps({"config_hash": cfg_hash, "metrics": metrics}))


class TestSummarize:
    def test_single_run_has_zero_std(self, tmp_path):
        write_summary(tmp_path / "seed_1", "h", {"acc": 0.5})
        frame = summarize(tmp_path)
        row = frame.set_index("metric").loc["acc"]
        assert row["mean"] == 0.5 and row["std"] == 0.0 and row["count"] == 1
        assert (tmp_path / "summary_aggregate.csv").exists()

    def test_mean_and_sample_std(self, tmp_path):
        write_summary(tmp_path / "seed_1", "h", {"acc": 0.5, "flag": True})
        write_summary(tmp_path / "seed_2", "h", {"acc": 0.7})
        row = summarize(tmp_path).set_index("metric").loc["acc"]
        assert row["mean"] == pytest.approx(0.6)
        assert row["std"] == pytest.approx(np.std([0.5, 0.7], ddof=1))

    def test_mixed_configs_are_refused(self, tmp_path):
        write_summary(tmp_path / "seed_1", "aaa", {"acc": 0.5})
        write_summary(tmp_path / "seed_2", "bbb", {"acc": 0.7})
        with pytest.raises(SummaryError) as info:
            summarize(tmp_path)
        assert "seed_1" in str(info.value) and "seed_2" in str(info.value)

    def test_empty_folder(self, tmp_path):
        with pytest.raises(SummaryError):
            summarize(tmp_path)


class TestCli:
    def test_run_exit_status(self, tmp_path):
        result = CliRunner().invoke(app, ["run", "gaussian", "--seed", "1", "--out", str(tmp_path),
                                          "--workers", "1"])
        assert result.exit_code == 0, result.output
        assert "PASSED" in result.output

    def test_missing_seed_is_a_config_error(self, tmp_path):
        result = CliRunner().invoke(app, ["run", "gaussian", "--out", str(tmp_path)])
        assert result.exit_code == 2

    def test_sweep_flags_need_sweep(self, tmp_path):
        result = CliRunner().invoke(app, ["run", "l2", "--seed", "1", "--param", "mc_samples"])
        assert result.exit_code != 0

    def test_summarize_command(self, tmp_path):
        write_summary(tmp_path / "seed_1", "h", {"acc": 0.5})
        result = CliRunner().invoke(app, ["summarize", str(tmp_path)])
        assert result.exit_code == 0
        empty = tmp_path / "empty"
        empty.mkdir()
        assert CliRunner().invoke(app, ["summarize", str(empty)]).exit_code == 1
