import json
import subprocess
import sys

import numpy as np
import pytest

from meprop import ConfigError, ExperimentConfig, bench_backprop, report, run, sweep
from meprop.harness import CSV_HEADER, MetricsRow, load_task_data


def tiny_config(**overrides):
    base = dict(task="synth_timing", mode="baseline", hidden_sizes=[12, 8],
                epochs=2, batch_size=10, seed=1, synth_features=16,
                synth_classes=4, synth_examples=300, measure_time=False)
    base.update(overrides)
    return ExperimentConfig(**base)


class TestConfigValidation:
    def test_meprop_requires_k(self):
        with pytest.raises(ConfigError) as err:
            tiny_config(mode="meprop")
        assert "k" in str(err.value)

    def test_mesimp_requires_prune_rate(self):
        with pytest.raises(ConfigError) as err:
            tiny_config(mode="mesimp", k=4)
        assert "prune_rate" in str(err.value)

    def test_meact_requires_p_and_e(self):
        with pytest.raises(ConfigError) as err:
            tiny_config(mode="meact", meact_e=1, epochs=3)
        assert "meact_p" in str(err.value)
        with pytest.raises(ConfigError) as err:
            tiny_config(mode="meact", meact_p=0.01, epochs=3)
        assert "meact_e" in str(err.value)

    def test_mnist_requires_dir(self):
        with pytest.raises(ConfigError) as err:
            tiny_config(task="mnist_mlp")
        assert "mnist_dir" in str(err.value)

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(task="synth_timing", banana=1)

    def test_bad_selection(self):
        with pytest.raises(ConfigError):
            tiny_config(selection="sometimes")


class TestRun:
    def test_summary_schema_and_outputs(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path / "run"))
        summary, rows, model = run(cfg)
        for key in ("best_epoch", "best_dev_accuracy", "test_accuracy_at_best",
                    "final_hidden_sizes", "total_backprop_ms",
                    "total_backprop_flops", "config", "label"):
            assert key in summary
        out = tmp_path / "run"
        assert (out / "metrics.csv").exists()
        assert (out / "summary.json").exists()
        assert (out / "model.ckpt").exists()
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == CSV_HEADER
        # one row per (epoch, split)
        assert len(lines) == 1 + cfg.epochs * 3

    def test_deterministic_csv_bytes_without_timing(self, tmp_path):
        cfg_a = tiny_config(out_dir=str(tmp_path / "a"))
        cfg_b = tiny_config(out_dir=str(tmp_path / "b"))
        run(cfg_a)
        run(cfg_b)
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b

    def test_timing_column_is_only_difference_with_timing_on(self, tmp_path):
        cfg_a = tiny_config(out_dir=str(tmp_path / "a"), measure_time=True)
        cfg_b = tiny_config(out_dir=str(tmp_path / "b"), measure_time=True)
        run(cfg_a)
        run(cfg_b)
        rows_a = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
        rows_b = (tmp_path / "b" / "metrics.csv").read_text().splitlines()
        time_col = CSV_HEADER.split(",").index("backprop_wall_time_ms")
        for ra, rb in zip(rows_a[1:], rows_b[1:]):
            ca = ra.split(",")
            cb = rb.split(",")
            del ca[time_col], cb[time_col]
            assert ca == cb

    def test_meprop_mode_trains(self):
        summary, rows, model = run(tiny_config(mode="meprop", k=3))
        assert model.layers[0].meprop_k == 3
        assert model.layers[-1].meprop_k is None
        assert summary["total_backprop_flops"] > 0

    def test_mesimp_mode_shrinks_or_holds(self):
        summary, rows, model = run(tiny_config(
            mode="mesimp", k=3, prune_rate=0.6, epochs=4,
            cycle_epochs=2, simplify_epochs=1, min_keep=2,
            prune_interval=150,
        ))
        assert "prune_events" in summary
        assert all(s <= h for s, h in zip(summary["final_hidden_sizes"], [12, 8]))

    def test_meact_mode_outputs(self, tmp_path):
        cfg = tiny_config(mode="meact", meact_p=0.05, meact_e=1, epochs=3,
                          out_dir=str(tmp_path / "act"))
        summary, rows, model = run(cfg)
        assert "avg_unmasked_per_example" in summary
        assert (tmp_path / "act" / "pretrain.ckpt").exists()
        assert (tmp_path / "act" / "masks.bin").exists()
        mean_updates = [r.mean_update for r in rows
                        if r.split == "train" and r.epoch >= 1]
        assert any(u > 0 for u in mean_updates)

    def test_lstm_task_runs(self):
        cfg = ExperimentConfig(
            task="synth_lstm", mode="meprop", k=2, hidden_sizes=[10],
            epochs=1, batch_size=10, seed=0, seq_examples=100, seq_len=6,
            vocab=8, measure_time=False,
        )
        summary, rows, model = run(cfg)
        assert 0.0 <= summary["best_dev_accuracy"] <= 1.0


class TestBench:
    def test_full_k_speedup_near_one(self):
        # k = n degenerates to the full path; ratio is measurement noise
        rows = bench_backprop([(500, 500)], [500], repetitions=15)
        row = rows[0]
        assert row["flop_ratio"] == 1.0
        assert 0.8 <= row["speedup"] <= 1.2

    def test_flop_ratio_exactly_k_over_n(self):
        rows = bench_backprop([(50, 30)], [5, 10, 50], repetitions=3)
        for row in rows:
            assert row["flops_meprop"] * row["n"] == \
                row["flops_full"] * row["k"]

    def test_speedup_visible_at_moderate_size(self):
        rows = bench_backprop([(500, 500)], [80], repetitions=15)
        assert rows[0]["speedup"] > 1.5


class TestReport:
    def test_empty_input(self):
        table = report([])
        assert "run" in table.splitlines()[0]
        assert len(table.splitlines()) == 1

    def test_rows_sorted_by_name_and_values_round_trip(self, tmp_path):
        for name, acc in (("zed", 0.5), ("abc", 0.75)):
            cfg = tiny_config(name=name)
            summary = {
                "config": cfg.to_dict(), "label": name, "best_epoch": 1,
                "best_dev_accuracy": acc, "test_accuracy_at_best": acc,
                "final_hidden_sizes": [12, 8], "total_backprop_ms": 1.5,
            }
            with open(tmp_path / f"{name}.json", "w") as fh:
                json.dump(summary, fh)
        table = report([str(tmp_path / "zed.json"), str(tmp_path / "abc.json")])
        lines = table.splitlines()
        assert len(lines) == 3
        assert lines[1].startswith("abc")
        assert lines[2].startswith("zed")
        assert "75.00" in lines[1]
        assert "50.00" in lines[2]


class TestSweep:
    def test_sweep_picks_best_dev(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path / "sweep"), epochs=1)
        summary = sweep(cfg, seeds=[1, 2])
        assert summary["best_seed"] in (1, 2)
        best = max(summary["runs"], key=lambda s: s["best_dev_accuracy"])
        assert summary["best_dev_accuracy"] == best["best_dev_accuracy"]
        assert (tmp_path / "sweep" / "sweep_summary.json").exists()
        assert (tmp_path / "sweep" / "seed_1" / "metrics.csv").exists()


class TestMetricsRow:
    def test_csv_round_trip_values(self):
        row = MetricsRow(3, "dev", 0.5, 1.25, 10.5, 1234, [500, 400], 0.01)
        text = row.to_csv()
        parts = text.split(",")
        assert parts[0] == "3"
        assert parts[1] == "dev"
        assert float(parts[2]) == 0.5
        assert parts[6] == "500;400"


class TestCli:
    def _run(self, *args):
        return subprocess.run(
            [sys.executable, "-m", "meprop.cli", *args],
            capture_output=True, text=True,
        )

    def test_train_subcommand(self, tmp_path):
        out = tmp_path / "cli"
        proc = self._run(
            "train", "--task", "synth_timing", "--mode", "meprop", "--k", "3",
            "--hidden", "12,8", "--epochs", "1", "--batch-size", "10",
            "--seed", "0", "--out", str(out), "--no-timing",
        )
        assert proc.returncode == 0, proc.stderr
        summary = json.loads(proc.stdout)
        assert summary["config"]["k"] == 3
        assert (out / "metrics.csv").exists()

    def test_invalid_config_is_machine_parsable_error(self):
        proc = self._run("train", "--task", "synth_timing", "--mode", "meprop")
        assert proc.returncode == 2
        line = proc.stderr.strip().splitlines()[-1]
        assert line.startswith("error: ConfigError:")
        assert "k" in line

    def test_bench_subcommand(self):
        proc = self._run("bench", "--sizes", "64x64", "--k", "8", "--reps", "3")
        assert proc.returncode == 0, proc.stderr
        assert "speedup" in proc.stdout

    def test_report_subcommand(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(json.dumps({
            "config": {"task": "synth_timing", "mode": "baseline", "k": None},
            "label": "x", "best_epoch": 0, "best_dev_accuracy": 0.5,
            "test_accuracy_at_best": 0.5, "final_hidden_sizes": [4],
            "total_backprop_ms": 0.0,
        }))
        proc = self._run("report", str(path))
        assert proc.returncode == 0
        assert "x" in proc.stdout

    def test_config_file_with_flag_override(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "task": "synth_timing", "mode": "baseline",
            "hidden_sizes": [12, 8], "epochs": 1, "batch_size": 10,
            "seed": 3, "synth_examples": 200, "measure_time": False,
        }))
        proc = self._run("train", "--config", str(cfg_path), "--seed", "7")
        assert proc.returncode == 0, proc.stderr
        summary = json.loads(proc.stdout)
        assert summary["config"]["seed"] == 7

    def test_missing_config_file_errors(self):
        proc = self._run("train", "--config", "/nonexistent/cfg.json")
        assert proc.returncode == 2
        assert proc.stderr.startswith("error:")


class TestTaskData:
    def test_synth_splits_disjoint_and_consistent(self):
        cfg = tiny_config()
        train, dev, test = load_task_data(cfg)
        assert len(train) == 300
        assert len(dev) == len(test) == 60
        assert train.num_classes == dev.num_classes == test.num_classes
