from __future__ import annotations

import json
from pathlib import Path

import pytest

from rankcal.cli import main
from rankcal.data import load_csv_dataset


def write_config(path: Path, **overrides) -> Path:
    cfg = {
        "data": {
            "synthetic": {
                "num_classes": 2,
                "modality_dims": [4, 3],
                "samples_per_class": 30,
                "class_separation": [4.0, 2.0],
                "noise_std": 1.0,
                "seed": 3,
            }
        },
        "split": {"train_fraction": 0.8, "seed": 0},
        "model": {"hidden_dim": 8, "latent_dim": 4},
        "train": {
            "epochs": 3,
            "learning_rate": 0.01,
            "batch_size": 16,
            "lambda": 5.0,
            "variant": "hinge",
            "seed": 0,
        },
        "output_dir": "out",
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path.write_text(json.dumps(cfg, indent=2))
    return path


class TestGenerate:
    def test_round_trip(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "config.json")
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 0
        out = capsys.readouterr().out
        assert "class 0: 30 samples" in out
        dataset = load_csv_dataset(tmp_path / "ds" / "manifest.json")
        assert dataset.num_samples == 60
        assert dataset.modality_dims == (4, 3)

    def test_regenerate_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path / "config.json")
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        for name in ("manifest.json", "modality_0.csv", "modality_1.csv", "labels.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_unwritable_out_dir_no_partial_manifest(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "config.json")
        blocker = tmp_path / "blocker"
        blocker.write_text("a file, not a directory")
        out_dir = blocker / "nested"
        assert main(["generate", "--config", str(cfg), "--out", str(out_dir)]) != 0
        assert not out_dir.exists()
        assert "error:" in capsys.readouterr().err

    def test_manifest_config_cannot_generate(self, tmp_path, capsys):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps({"data": {"manifest": "missing.json"}}))
        assert main(["generate", "--config", str(cfg_path)]) != 0


class TestTrainCommand:
    def test_run_directory_layout(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "config.json")
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(run_dir)]) == 0
        for name in ("config.json", "history.csv", "metrics.json", "checkpoint.bin", "records.csv"):
            assert (run_dir / name).exists(), name
        out = capsys.readouterr().out
        assert "acc=" in out and "vrr=" in out and "nll=" in out and "aurc=" in out
        history = (run_dir / "history.csv").read_text().splitlines()
        assert history[0] == "epoch,cls_loss,cml_loss,train_acc"
        assert len(history) == 1 + 3

    def test_rerun_identical_metrics(self, tmp_path):
        cfg = write_config(tmp_path / "config.json")
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(cfg), "--out", str(a)]) == 0
        assert main(["train", "--config", str(cfg), "--out", str(b)]) == 0
        assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
        assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()
        assert (a / "records.csv").read_bytes() == (b / "records.csv").read_bytes()
        assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
        # config snapshots differ only in the single timestamp metadata key
        snap_a = json.loads((a / "config.json").read_text())
        snap_b = json.loads((b / "config.json").read_text())
        snap_a.pop("meta")
        snap_b.pop("meta")
        assert snap_a == snap_b

    def test_missing_manifest_fails_naming_path(self, tmp_path, capsys):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(
            json.dumps({"data": {"manifest": "nowhere/manifest.json"}, "train": {"epochs": 1}})
        )
        assert main(["train", "--config", str(cfg_path)]) != 0
        assert "manifest.json" in capsys.readouterr().err

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_config(tmp_path / "config.json")
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(run_dir), "--seed", "9"]) == 0
        snapshot = json.loads((run_dir / "config.json").read_text())
        assert snapshot["resolved_train"]["seed"] == 9

    def test_env_seed_override(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path / "config.json")
        run_dir = tmp_path / "run"
        monkeypatch.setenv("CML_SEED", "11")
        assert main(["train", "--config", str(cfg), "--out", str(run_dir)]) == 0
        snapshot = json.loads((run_dir / "config.json").read_text())
        assert snapshot["resolved_train"]["seed"] == 11

    def test_exactly_one_data_source_required(self, tmp_path, capsys):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps({"data": {}}))
        assert main(["train", "--config", str(cfg_path)]) != 0
        assert "exactly one" in capsys.readouterr().err


class TestCompareCommand:
    def test_compare_run_with_itself_zero_deltas(self, tmp_path):
        cfg = write_config(tmp_path / "config.json")
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(run_dir)]) == 0
        compare_cfg = write_config(
            tmp_path / "compare.json",
            compare={"baseline_run": str(run_dir), "cml_run": str(run_dir)},
        )
        out_dir = tmp_path / "cmp"
        assert main(["compare", "--config", str(compare_cfg), "--out", str(out_dir)]) == 0
        comparison = json.loads((out_dir / "comparison.json").read_text())
        assert comparison["vrr_delta_pct"] == 0.0
        assert comparison["accuracy_delta_pct"] == 0.0
        assert comparison["mean_abs_conf_shift_full"] == 0.0

    def test_deltas_match_run_metrics_and_curve_rows(self, tmp_path):
        cfg_a = write_config(tmp_path / "a.json", train={"lambda": 0.0}, output_dir="run_a")
        cfg_b = write_config(tmp_path / "b.json", train={"lambda": 10.0}, output_dir="run_b")
        assert main(["train", "--config", str(cfg_a)]) == 0
        assert main(["train", "--config", str(cfg_b)]) == 0
        compare_cfg = write_config(
            tmp_path / "compare.json",
            compare={"baseline_run": "run_a", "cml_run": "run_b"},
        )
        out_dir = tmp_path / "cmp"
        assert main(["compare", "--config", str(compare_cfg), "--out", str(out_dir)]) == 0
        comparison = json.loads((out_dir / "comparison.json").read_text())
        metrics_a = json.loads((tmp_path / "run_a" / "metrics.json").read_text())
        metrics_b = json.loads((tmp_path / "run_b" / "metrics.json").read_text())
        assert comparison["vrr_delta_pct"] == pytest.approx(
            metrics_b["vrr_pct"] - metrics_a["vrr_pct"]
        )
        assert comparison["accuracy_delta_pct"] == pytest.approx(
            metrics_b["accuracy_pct"] - metrics_a["accuracy_pct"]
        )
        curve = (out_dir / "confidence_by_subset_size.csv").read_text().splitlines()
        assert curve[0] == "subset_size,conf_baseline,conf_cml"
        assert len(curve) == 1 + 2  # one row per subset size 1..M

    def test_spec_mismatch_fails(self, tmp_path):
        cfg_a = write_config(tmp_path / "a.json", output_dir="run_a")
        cfg_b = write_config(
            tmp_path / "b.json", model={"hidden_dim": 6, "latent_dim": 4}, output_dir="run_b"
        )
        assert main(["train", "--config", str(cfg_a)]) == 0
        assert main(["train", "--config", str(cfg_b)]) == 0
        compare_cfg = write_config(
            tmp_path / "compare.json",
            compare={"baseline_run": "run_a", "cml_run": "run_b"},
        )
        assert main(["compare", "--config", str(compare_cfg), "--out", str(tmp_path / "c")]) != 0


class TestSweepCommand:
    def test_lambda_sweep_csv(self, tmp_path):
        cfg = write_config(
            tmp_path / "config.json",
            sweep={"kind": "lambda", "lambda_grid": [0.0, 5.0]},
            train={"epochs": 2},
        )
        out_dir = tmp_path / "sweep"
        assert main(["sweep", "--config", str(cfg), "--out", str(out_dir)]) == 0
        lines = (out_dir / "sweep_lambda.csv").read_text().splitlines()
        assert lines[0] == "lambda,val_acc,val_vrr"
        assert len(lines) == 3
        best = json.loads((out_dir / "sweep_lambda.json").read_text())
        assert best["best_lambda"] in (0.0, 5.0)

    def test_empty_grid_fails(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "config.json", sweep={"kind": "lambda", "lambda_grid": []}
        )
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) != 0
        assert "empty" in capsys.readouterr().err

    def test_noise_sweep_csv(self, tmp_path):
        cfg = write_config(
            tmp_path / "config.json",
            sweep={"kind": "noise", "epsilons": [0.0, 0.5], "target_sets": [[0], [1]]},
            train={"epochs": 2, "lambda": 5.0},
        )
        out_dir = tmp_path / "sweep"
        assert main(["sweep", "--config", str(cfg), "--out", str(out_dir)]) == 0
        lines = (out_dir / "sweep_noise.csv").read_text().splitlines()
        assert lines[0] == "param,acc_baseline,acc_cml,delta"
        assert len(lines) == 1 + 4
        assert lines[1].startswith("eps=0;on=0")

    def test_missing_kind_fails(self, tmp_path):
        cfg = write_config(tmp_path / "config.json", sweep={})
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) != 0
