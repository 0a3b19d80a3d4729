import json

import numpy as np
import pytest

from src.datagen import Dataset, SplitDataset
from src.records import STATUS_ABORTED, GuardedSplit, IsolationMonitor, RunRecord


def make_record():
    record = RunRecord("l2_reparam", ["rho"], seed=3)
    record.add_row(0, 1.0, 2.0, 3.0, 2.0, [0.5])
    record.add_row(1, 0.5, 1.5, 2.5, 2.0, [0.7], nnz=4)
    return record


class TestRunRecord:
    def test_columns_and_final(self):
        record = make_record()
        frame = record.to_frame()
        assert list(frame.columns) == ["epoch", "train_loss", "reg_loss", "test_metric",
                                       "gen_gap", "rho_0", "nnz"]
        assert record.final["rho_0"] == 0.7
        np.testing.assert_allclose(record.rho_trace(), [[0.5], [0.7]])
        assert np.isnan(frame["nnz"].iloc[0])

    def test_rho_length_checked(self):
        record = RunRecord("noise_scales", ["sigma_0", "sigma_1"], seed=0)
        with pytest.raises(ValueError, match="Expected 2"):
            record.add_row(0, 1.0, 1.0, 1.0, 0.0, [1.0])

    def test_epochs_must_increase(self):
        record = make_record()
        with pytest.raises(ValueError, match="Epochs must increase"):
            record.add_row(1, 0.1, 0.1, 0.1, 0.0, [1.0])

    def test_csv_header_line(self):
        text = make_record().to_csv_text("config_hash=abc seed=3")
        lines = text.splitlines()
        assert lines[0] == "# config_hash=abc seed=3"
        assert lines[1].startswith("epoch,train_loss")
        assert len(lines) == 4

    def test_json_keeps_meta_and_extra_keys(self):
        record = make_record()
        record.abort("diverged")
        payload = json.loads(record.to_json_text(config_hash="abc"))
        assert payload["config_hash"] == "abc"
        assert payload["status"] == STATUS_ABORTED
        assert payload["rng_algorithm"] == "PCG64"
        assert len(payload["rows"]) == 2
        assert not record.completed

    def test_json_text_does_not_depend_on_timing(self):
        first, second = make_record(), make_record()
        first.wall_time, second.wall_time = 0.25, 7.5
        assert first.to_json_text(config_hash="abc") == second.to_json_text(config_hash="abc")
        assert "wall_time" not in json.loads(first.to_json_text())


class TestIsolation:
    def make_split(self):
        part = Dataset(np.zeros((4, 1)), np.zeros(4))
        return SplitDataset(part, part.take(np.arange(2)), part, (0.5, 0.25, 0.25))

    def test_counts_cross_reads(self):
        monitor = IsolationMonitor()
        split = GuardedSplit(self.make_split(), monitor)
        with monitor.in_phase("theta"):
            split.train.rows([0, 1])
        with monitor.in_phase("rho"):
            split.reg.rows()
        assert monitor.cross_reads == 0
        with monitor.in_phase("theta"):
            split.reg.rows()
        with monitor.in_phase("rho"):
            split.train.rows()
        counts = monitor.to_dict()
        assert counts["cross_reads"] == 2
        assert counts["train_theta"] == 1

    def test_phase_restored_and_checked(self):
        monitor = IsolationMonitor()
        with monitor.in_phase("rho"):
            assert monitor.phase == "rho"
        assert monitor.phase == "eval"
        with pytest.raises(ValueError):
            with monitor.in_phase("warmup"):
                pass

    def test_partition_rows(self):
        split = GuardedSplit(self.make_split(), IsolationMonitor())
        X, y = split.reg.rows()
        assert X.shape == (2, 1) and len(split.reg) == 2
        assert split.train.task == "regression"
