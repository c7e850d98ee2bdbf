"""Config-driven command line: generate | train | compare | sweep.

All experiment parameters live in one JSON config; the flags only pick the
config file, output directory, seed override, and sweep parallelism, so a run
is reproducible from the config alone. `CML_SEED` in the environment (or
--seed, which wins) overrides the configured training seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

from . import calibration, data, trainer
from .errors import ConfigError, DivergenceError, ParseError
from .metrics import MetricsReport, mean_abs_conf_shift
from .model import ClassifierParams, ModelSpec, SubsetMask, load_checkpoint, save_checkpoint

DEFAULT_HIDDEN_DIM = 128
DEFAULT_LATENT_DIM = 64

CHECKPOINT_NAME = "checkpoint.bin"
CONFIG_SNAPSHOT_NAME = "config.json"
HISTORY_NAME = "history.csv"
METRICS_NAME = "metrics.json"
RECORDS_NAME = "records.csv"


def _load_config(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    data_section = cfg.get("data", {})
    if ("synthetic" in data_section) == ("manifest" in data_section):
        raise ConfigError("config data section needs exactly one of 'synthetic' or 'manifest'")
    return cfg


def _resolve(base: Path, relative: str) -> Path:
    path = Path(relative)
    return path if path.is_absolute() else base / path


@dataclass
class PreparedData:
    train: data.Dataset
    test: data.Dataset
    model_spec: ModelSpec


def _load_source_dataset(cfg: dict, base: Path) -> data.Dataset:
    section = cfg["data"]
    if "synthetic" in section:
        return data.generate_synthetic(data.SyntheticSpec.from_json_dict(section["synthetic"]))
    return data.load_csv_dataset(_resolve(base, section["manifest"]))


def _prepare(cfg: dict, base: Path) -> PreparedData:
    """Load or generate, split, and (by default) standardize on the train split."""
    dataset = _load_source_dataset(cfg, base)
    test_manifest = cfg["data"].get("test_manifest")
    if test_manifest is not None:
        train_set = dataset
        test_set = data.load_csv_dataset(_resolve(base, test_manifest))
    elif "split" in cfg:
        split_cfg = cfg["split"]
        train_set, test_set = data.split(
            dataset,
            train_fraction=float(split_cfg.get("train_fraction", 0.75)),
            seed=int(split_cfg.get("seed", 0)),
        )
    else:
        train_set = test_set = dataset
    if cfg.get("standardize", True):
        stats = data.standardize_fit(train_set)
        train_set = data.standardize_apply(train_set, stats)
        test_set = data.standardize_apply(test_set, stats)

    model_cfg = cfg.get("model", {})
    model_spec = ModelSpec(
        modality_dims=tuple(model_cfg.get("modality_dims", train_set.modality_dims)),
        hidden_dim=int(model_cfg.get("hidden_dim", DEFAULT_HIDDEN_DIM)),
        latent_dim=int(model_cfg.get("latent_dim", DEFAULT_LATENT_DIM)),
        num_classes=int(model_cfg.get("num_classes", train_set.num_classes)),
    )
    if model_spec.modality_dims != train_set.modality_dims:
        raise ConfigError(
            f"configured modality_dims {model_spec.modality_dims} do not match the data "
            f"{train_set.modality_dims}"
        )
    if model_spec.num_classes != train_set.num_classes:
        raise ConfigError(
            f"configured num_classes {model_spec.num_classes} does not match the data "
            f"{train_set.num_classes}"
        )
    return PreparedData(train=train_set, test=test_set, model_spec=model_spec)


def _build_train_config(cfg: dict, model_spec: ModelSpec, seed_override: int | None) -> trainer.TrainConfig:
    section = dict(cfg.get("train", {}))
    seed = int(section.get("seed", 0))
    if seed_override is not None:
        seed = seed_override
    config = trainer.TrainConfig(
        model=model_spec,
        epochs=int(section.get("epochs", 50)),
        learning_rate=float(section.get("learning_rate", 1e-3)),
        batch_size=int(section.get("batch_size", 32)),
        lam=float(section.get("lambda", 0.0)),
        variant=str(section.get("variant", "hinge")),
        skip_on_wrong_full=bool(section.get("skip_on_wrong_full", True)),
        detach_superset=bool(section.get("detach_superset", False)),
        seed=seed,
        vrr_mode=str(section.get("vrr_mode", "sampled")),
        vrr_repeats=int(section.get("vrr_repeats", 1)),
    )
    config.validate()
    return config


def _write_json(path: Path, obj: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(cfg: dict, base: Path, override: str | None, default: str) -> Path:
    if override is not None:
        return Path(override)
    return _resolve(base, cfg.get("output_dir", default))


def cmd_generate(config_path: Path, out_override: str | None) -> int:
    cfg = _load_config(config_path)
    if "synthetic" not in cfg["data"]:
        raise ConfigError("generate needs a data.synthetic section")
    spec = data.SyntheticSpec.from_json_dict(cfg["data"]["synthetic"])
    dataset = data.generate_synthetic(spec)
    out = _out_dir(cfg, config_path.parent, out_override, "dataset")
    manifest = data.write_csv_dataset(dataset, out)
    counts = dataset.class_counts()
    print(f"wrote {manifest}")
    for k, count in enumerate(counts):
        print(f"class {k}: {count} samples")
    return 0


def _write_run_dir(
    run_dir: Path,
    cfg: dict,
    config: trainer.TrainConfig,
    result: trainer.RunResult,
) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = dict(cfg)
    snapshot["resolved_train"] = {
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "lambda": config.lam,
        "variant": config.variant,
        "skip_on_wrong_full": config.skip_on_wrong_full,
        "detach_superset": config.detach_superset,
        "seed": config.seed,
        "vrr_mode": config.vrr_mode,
        "vrr_repeats": config.vrr_repeats,
    }
    # The timestamp is the single non-reproducible key in the run directory.
    snapshot["meta"] = {"written_at": datetime.now(timezone.utc).isoformat()}
    _write_json(run_dir / CONFIG_SNAPSHOT_NAME, snapshot)
    with open(run_dir / HISTORY_NAME, "w", encoding="ascii", newline="\n") as fh:
        fh.write("epoch,cls_loss,cml_loss,train_acc\n")
        for epoch, stats in enumerate(result.history):
            fh.write(
                f"{epoch},{stats.cls_loss:.9g},{stats.reg_loss:.9g},{stats.train_accuracy:.9g}\n"
            )
    with open(run_dir / METRICS_NAME, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result.report.to_json())
    save_checkpoint(run_dir / CHECKPOINT_NAME, config.model, result.params)
    calibration.write_records_csv(run_dir / RECORDS_NAME, result.vrr_evaluation.records)


def cmd_train(config_path: Path, out_override: str | None, seed_override: int | None) -> int:
    cfg = _load_config(config_path)
    prepared = _prepare(cfg, config_path.parent)
    config = _build_train_config(cfg, prepared.model_spec, seed_override)
    result = trainer.run_and_evaluate(config, prepared.train, prepared.test)
    run_dir = _out_dir(cfg, config_path.parent, out_override, "run")
    _write_run_dir(run_dir, cfg, config, result)
    report = result.report
    print(
        f"acc={report.accuracy_pct:.2f} vrr={report.vrr_pct:.2f} "
        f"nll={report.nll_scaled:.2f} aurc={report.aurc_scaled:.2f}"
    )
    print(f"run directory: {run_dir}")
    return 0


def _load_run(
    run_dir: Path,
) -> tuple[ModelSpec, ClassifierParams, trainer.TrainConfig, MetricsReport]:
    spec, params = load_checkpoint(run_dir / CHECKPOINT_NAME)
    with open(run_dir / CONFIG_SNAPSHOT_NAME, "r", encoding="utf-8") as fh:
        snapshot = json.load(fh)
    resolved = snapshot["resolved_train"]
    config = trainer.TrainConfig(
        model=spec,
        epochs=int(resolved["epochs"]),
        learning_rate=float(resolved["learning_rate"]),
        batch_size=int(resolved["batch_size"]),
        lam=float(resolved["lambda"]),
        variant=resolved["variant"],
        skip_on_wrong_full=bool(resolved["skip_on_wrong_full"]),
        detach_superset=bool(resolved["detach_superset"]),
        seed=int(resolved["seed"]),
        vrr_mode=resolved["vrr_mode"],
        vrr_repeats=int(resolved["vrr_repeats"]),
    )
    with open(run_dir / METRICS_NAME, "r", encoding="utf-8") as fh:
        report = MetricsReport.from_json_dict(json.load(fh))
    return spec, params, config, report


def cmd_compare(config_path: Path, out_override: str | None) -> int:
    cfg = _load_config(config_path)
    compare_cfg = cfg.get("compare", {})
    for key in ("baseline_run", "cml_run"):
        if key not in compare_cfg:
            raise ConfigError(f"compare section needs {key!r}")
    base = config_path.parent
    spec_a, params_a, config_a, _ = _load_run(_resolve(base, compare_cfg["baseline_run"]))
    spec_b, params_b, config_b, _ = _load_run(_resolve(base, compare_cfg["cml_run"]))
    if spec_a != spec_b:
        raise ConfigError("runs have different model specs")
    if "test_manifest" in compare_cfg:
        test_set = data.load_csv_dataset(_resolve(base, compare_cfg["test_manifest"]))
    else:
        test_set = _prepare(cfg, base).test
    report_a = trainer.evaluate(params_a, test_set, config_a)
    report_b = trainer.evaluate(params_b, test_set, config_b)
    full = SubsetMask.full(test_set.num_modalities)
    shift = mean_abs_conf_shift(params_a, params_b, test_set, [full])
    comparison = {
        "baseline": report_a.to_json_dict(),
        "cml": report_b.to_json_dict(),
        "vrr_delta_pct": report_b.vrr_pct - report_a.vrr_pct,
        "accuracy_delta_pct": report_b.accuracy_pct - report_a.accuracy_pct,
        "mean_abs_conf_shift_full": shift,
    }
    out = _out_dir(cfg, base, out_override, "compare")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "comparison.json", comparison)
    sizes = sorted(
        set(report_a.mean_confidence_by_subset_size) | set(report_b.mean_confidence_by_subset_size)
    )
    with open(out / "confidence_by_subset_size.csv", "w", encoding="ascii", newline="\n") as fh:
        fh.write("subset_size,conf_baseline,conf_cml\n")
        for size in sizes:
            conf_a = report_a.mean_confidence_by_subset_size.get(size, float("nan"))
            conf_b = report_b.mean_confidence_by_subset_size.get(size, float("nan"))
            fh.write(f"{size},{conf_a:.9g},{conf_b:.9g}\n")
    print(
        f"vrr_delta={comparison['vrr_delta_pct']:.2f} "
        f"acc_delta={comparison['accuracy_delta_pct']:.2f} "
        f"conf_shift={shift:.6f}"
    )
    print(f"comparison directory: {out}")
    return 0


def _parse_target_sets(raw, num_modalities: int) -> list[SubsetMask]:
    if raw is None:
        return trainer.default_target_sets(num_modalities)
    masks = []
    for entry in raw:
        mask = SubsetMask.of(entry)
        mask.validate_for(num_modalities)
        masks.append(mask)
    return masks


def cmd_sweep(
    config_path: Path, out_override: str | None, seed_override: int | None, jobs: int
) -> int:
    cfg = _load_config(config_path)
    sweep_cfg = cfg.get("sweep", {})
    kind = sweep_cfg.get("kind")
    if kind not in ("lambda", "noise"):
        raise ConfigError("sweep section needs kind: 'lambda' or 'noise'")
    prepared = _prepare(cfg, config_path.parent)
    config = _build_train_config(cfg, prepared.model_spec, seed_override)
    out = _out_dir(cfg, config_path.parent, out_override, "sweep")
    out.mkdir(parents=True, exist_ok=True)

    if kind == "lambda":
        grid = sweep_cfg.get("lambda_grid", list(trainer.DEFAULT_LAMBDA_GRID))
        if not grid:
            raise ConfigError("empty lambda grid")
        result = trainer.lambda_sweep(config, grid, prepared.train, prepared.test, jobs=jobs)
        with open(out / "sweep_lambda.csv", "w", encoding="ascii", newline="\n") as fh:
            fh.write("lambda,val_acc,val_vrr\n")
            for row in result.rows:
                if row.failed:
                    fh.write(f"{row.lam:.9g},failed,failed\n")
                else:
                    fh.write(f"{row.lam:.9g},{row.val_accuracy:.9g},{row.val_vrr_pct:.9g}\n")
        _write_json(out / "sweep_lambda.json", {"best_lambda": result.best_lambda})
        print(f"best_lambda={result.best_lambda:g}")
        return 0

    epsilons = sweep_cfg.get("epsilons", list(trainer.DEFAULT_NOISE_GRID))
    if not epsilons:
        raise ConfigError("empty epsilon grid")
    target_sets = _parse_target_sets(sweep_cfg.get("target_sets"), prepared.test.num_modalities)
    base = config_path.parent
    if "baseline_run" in sweep_cfg and "cml_run" in sweep_cfg:
        _, params_a, _, _ = _load_run(_resolve(base, sweep_cfg["baseline_run"]))
        _, params_b, _, _ = _load_run(_resolve(base, sweep_cfg["cml_run"]))
    else:
        if config.lam <= 0:
            raise ConfigError(
                "noise sweep without baseline_run/cml_run needs train.lambda > 0 to train the "
                "regularized model"
            )
        params_a = trainer.train(replace(config, lam=0.0), prepared.train).params
        params_b = trainer.train(config, prepared.train).params
    rows = trainer.noise_sweep(
        params_a,
        params_b,
        prepared.test,
        epsilons=[float(e) for e in epsilons],
        target_sets=target_sets,
        seed=config.seed,
    )
    with open(out / "sweep_noise.csv", "w", encoding="ascii", newline="\n") as fh:
        fh.write("param,acc_baseline,acc_cml,delta\n")
        for row in rows:
            param = f"eps={row.epsilon:g};on={row.targets.format()}"
            fh.write(f"{param},{row.acc_baseline:.9g},{row.acc_cml:.9g},{row.delta:.9g}\n")
    print(f"wrote {out / 'sweep_noise.csv'} ({len(rows)} rows)")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="rankcal",
        description="Train and evaluate confidence-ranking-calibrated multimodal classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "write a synthetic dataset as CSV files plus a manifest"),
        ("train", "train one model and write a run directory"),
        ("compare", "compare a baseline run with a regularized run"),
        ("sweep", "run a lambda or noise sweep"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the experiment config JSON")
        cmd.add_argument("--out", default=None, help="output directory override")
        cmd.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
        cmd.add_argument("--seed", type=int, default=None, help="seed override")
    args = parser.parse_args(argv)

    seed_override = args.seed
    if seed_override is None and os.environ.get("CML_SEED"):
        seed_override = int(os.environ["CML_SEED"])

    config_path = Path(args.config)
    try:
        if args.command == "generate":
            return cmd_generate(config_path, args.out)
        if args.command == "train":
            return cmd_train(config_path, args.out, seed_override)
        if args.command == "compare":
            return cmd_compare(config_path, args.out)
        return cmd_sweep(config_path, args.out, seed_override, args.jobs)
    except (ConfigError, ParseError, DivergenceError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
