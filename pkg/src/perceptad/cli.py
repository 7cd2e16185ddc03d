"""Command-line entry point.

Subcommands: train, train-flat, score, eval, search, sweep, synth. Each run
writes its artifacts (config echo, checkpoint, reports) under a single
output directory and refuses to overwrite one without --force.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .config import ConfigError, get_typed
from .data import (Manifest, ManifestError, PreprocessSpec, SyntheticSpec,
                   generate_synthetic, load_manifest, load_split)
from .evaluation import EvalReport, evaluate, roc_auc, score_batch
from .features import (FixedRandomExtractor, compute_stats, load_stats,
                       make_fixed_random_extractor, save_stats)
from .losses import LossConfig
from .model import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .search import (Candidate, SearchSpace, Trial, TrialRunner, ValidationSpec,
                     build_validation_set, cross_validate, sensitivity_sweep)
from .train import (TrainConfig, TrainingDivergedError, level_stage, train,
                    train_flat)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _error_record(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def _prepare_out_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved_config(args) -> dict[str, str]:
    cfg = cfgmod.load_config(args.config) if args.config else {}
    return cfgmod.apply_overrides(cfg, args.set or [])


def _preprocess_spec(cfg: dict[str, str]) -> PreprocessSpec:
    return PreprocessSpec(
        target_resolution=get_typed(cfg, "preprocess.target_resolution", 32),
        grayscale=get_typed(cfg, "preprocess.grayscale", True),
        center_crop=get_typed(cfg, "preprocess.center_crop", False),
        hist_equalize=get_typed(cfg, "preprocess.hist_equalize", False),
    )


def _model_cfg(cfg: dict[str, str], spec: PreprocessSpec) -> ModelConfig:
    return ModelConfig(
        target_resolution=spec.target_resolution,
        base_resolution=get_typed(cfg, "model.base_resolution", 8),
        bottleneck_dim=get_typed(cfg, "model.bottleneck_dim", 64),
        base_channels=get_typed(cfg, "model.base_channels", 32),
        min_channels=get_typed(cfg, "model.min_channels", 8),
        input_channels=1 if spec.grayscale else 3,
    )


def _train_cfg(cfg: dict[str, str]) -> TrainConfig:
    return TrainConfig(
        steps_per_level=get_typed(cfg, "train.steps_per_level", 2000),
        fade_fraction=get_typed(cfg, "train.fade_fraction", 0.5),
        learning_rate=get_typed(cfg, "train.learning_rate", 1e-3),
        batch_size=get_typed(cfg, "train.batch_size", 32),
        holdout_fraction=get_typed(cfg, "train.holdout_fraction", 0.1),
        patience=get_typed(cfg, "train.patience", 5),
        rel_improve_tol=get_typed(cfg, "train.rel_improve_tol", 1e-3),
        eval_every=get_typed(cfg, "train.eval_every", 100),
        seed=get_typed(cfg, "seed", 0),
        loss_kind=get_typed(cfg, "train.loss_kind", "perceptual"),
    )


def _loss_cfg(cfg: dict[str, str]) -> LossConfig:
    return LossConfig(epsilon=get_typed(cfg, "loss.epsilon", 1e-6),
                      l1_weight=get_typed(cfg, "loss.l1_weight", 0.0))


def _extractor(cfg: dict[str, str], input_channels: int) -> FixedRandomExtractor:
    return make_fixed_random_extractor(
        seed=get_typed(cfg, "extractor.seed", 1234),
        n_stages=get_typed(cfg, "extractor.n_stages", 3),
        channels_per_stage=get_typed(cfg, "extractor.channels", [32, 64, 128]),
        input_channels=input_channels,
    )


def _write_config_echo(out: Path, cfg: dict[str, str]) -> None:
    (out / "config-echo.txt").write_text(cfgmod.render_config(cfg), encoding="utf-8")


def cmd_train(args, flat: bool) -> int:
    cfg = _resolved_config(args)
    out = _prepare_out_dir(args.out, args.force)
    spec = _preprocess_spec(cfg)
    model_cfg = _model_cfg(cfg, spec)
    train_cfg = _train_cfg(cfg)
    loss_cfg = _loss_cfg(cfg)
    extractor = _extractor(cfg, model_cfg.input_channels)
    stage_offset = get_typed(cfg, "train.stage_offset", 0)

    manifest = load_manifest(args.manifest)
    images, labels, _ = load_split(manifest, "train", spec)
    if labels.any():
        raise ManifestError("train split contains anomalous samples")

    fit = train_flat if flat else train
    model, report = fit(images, model_cfg, train_cfg, loss_cfg, extractor,
                        stage_offset=stage_offset)

    score_stage = level_stage(model_cfg.n_levels, extractor.n_stages, stage_offset)
    stats = compute_stats(extractor, torch.as_tensor(images), score_stage,
                          source="train-normals")
    save_checkpoint(model, out / "checkpoint.pt")
    save_stats(out / "stats.npz", [stats])
    (out / "train_report.json").write_text(report.to_json(), encoding="utf-8")
    cfg["train.flat"] = str(flat).lower()
    cfg["eval.score_stage"] = str(score_stage)
    _write_config_echo(out, cfg)
    print(f"trained model -> {out} (final holdout loss {report.final_holdout_loss:.6f})")
    return 0


def _load_run(run_dir: str):
    run = Path(run_dir)
    cfg = cfgmod.load_config(run / "config-echo.txt")
    model = load_checkpoint(run / "checkpoint.pt")
    stage = get_typed(cfg, "eval.score_stage", 0)
    stats = load_stats(run / "stats.npz")[stage]
    spec = _preprocess_spec(cfg)
    extractor = _extractor(cfg, model.config.input_channels)
    if spec.target_resolution != model.config.target_resolution:
        raise ConfigError(
            f"preprocess resolution {spec.target_resolution} does not match checkpoint "
            f"resolution {model.config.target_resolution}")
    return cfg, model, extractor, stats, stage, spec


def _write_scores_csv(path: Path, ids, scores, labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["id", "score", "label"])
        for i, s, l in zip(ids, scores, labels):
            w.writerow([i, f"{s:.10g}", int(l)])


def cmd_score(args) -> int:
    cfg, model, extractor, stats, stage, spec = _load_run(args.run_dir)
    manifest = load_manifest(args.manifest)
    images, labels, ids = load_split(manifest, args.split, spec)
    loss_kind = get_typed(cfg, "train.loss_kind", "perceptual")
    scores = score_batch(model, extractor, stats, torch.as_tensor(images, dtype=torch.float32),
                         stage, get_typed(cfg, "loss.epsilon", 1e-6), loss_kind=loss_kind)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_scores_csv(out, ids, scores, labels)
    print(f"wrote {len(ids)} scores -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg, model, extractor, stats, stage, spec = _load_run(args.run_dir)
    manifest = load_manifest(args.manifest)
    images, labels, ids = load_split(manifest, args.split, spec)
    loss_kind = get_typed(cfg, "train.loss_kind", "perceptual")
    report = evaluate(model, extractor, stats, torch.as_tensor(images, dtype=torch.float32),
                      labels, stage, get_typed(cfg, "loss.epsilon", 1e-6), loss_kind=loss_kind)
    out = _prepare_out_dir(args.out, args.force)
    (out / "eval_report.json").write_text(report.to_json(), encoding="utf-8")
    scores = score_batch(model, extractor, stats, torch.as_tensor(images, dtype=torch.float32),
                         stage, get_typed(cfg, "loss.epsilon", 1e-6), loss_kind=loss_kind)
    _write_scores_csv(out / "scores.csv", ids, scores, labels)
    _write_config_echo(out, cfg)
    print(f"ROC AUC {report.roc_auc:.4f} ({report.n_normal} normal / "
          f"{report.n_anomalous} anomalous) -> {out}")
    return 0


def _search_space(cfg: dict[str, str]) -> SearchSpace:
    resolutions = get_typed(cfg, "search.resolutions", [32])
    grayscale_opts = get_typed(cfg, "search.grayscale", [1])
    specs = [PreprocessSpec(target_resolution=r, grayscale=bool(g),
                            center_crop=get_typed(cfg, "preprocess.center_crop", False),
                            hist_equalize=get_typed(cfg, "preprocess.hist_equalize", False))
             for r in resolutions for g in grayscale_opts]
    return SearchSpace(
        bottleneck_dims=get_typed(cfg, "search.bottlenecks", [16, 64]),
        loss_stages=get_typed(cfg, "search.stages", [1, 2]),
        preprocess_specs=specs,
    )


def _make_runner(cfg, manifest: Manifest, space: SearchSpace):
    trial_cfg = TrainConfig(
        steps_per_level=get_typed(cfg, "search.trial_steps_per_level", 200),
        fade_fraction=get_typed(cfg, "train.fade_fraction", 0.5),
        learning_rate=get_typed(cfg, "train.learning_rate", 1e-3),
        batch_size=get_typed(cfg, "train.batch_size", 32),
        holdout_fraction=get_typed(cfg, "train.holdout_fraction", 0.1),
        patience=get_typed(cfg, "train.patience", 5),
        rel_improve_tol=get_typed(cfg, "train.rel_improve_tol", 1e-3),
        eval_every=get_typed(cfg, "train.eval_every", 100),
        seed=get_typed(cfg, "seed", 0),
    )
    loss_cfg = _loss_cfg(cfg)
    base_model_cfg = _model_cfg(cfg, space.preprocess_specs[0])

    normals_by_spec, anomalies_by_spec = {}, {}
    anomaly_ids: list[str] = []
    anomaly_types: list[str] = []
    n_normals = 0
    for spec in space.preprocess_specs:
        imgs, labels, ids = load_split(manifest, "train", spec)
        normals_by_spec[spec.key()] = imgs
        n_normals = imgs.shape[0]
        pool_imgs, pool_labels, pool_ids = load_split(manifest, "val-pool", spec)
        if not pool_labels.all():
            raise ManifestError("val-pool split must contain only anomalous samples")
        anomalies_by_spec[spec.key()] = pool_imgs
        anomaly_ids = pool_ids
    pool_rows = manifest.split("val-pool")
    anomaly_types = [r.anomaly_type for r in pool_rows]

    extractors: dict[str, FixedRandomExtractor] = {}

    def extractor_for_spec(p: PreprocessSpec):
        key = p.key()
        if key not in extractors:
            extractors[key] = _extractor(cfg, 1 if p.grayscale else 3)
        return extractors[key]

    runner = TrialRunner(extractor_for_spec, base_model_cfg, trial_cfg, loss_cfg,
                         normals_by_spec, anomalies_by_spec, anomaly_ids)
    return runner, n_normals, anomaly_ids, anomaly_types, extractor_for_spec


def cmd_search(args) -> int:
    cfg = _resolved_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    space = _search_space(cfg)
    runner, n_normals, anomaly_ids, anomaly_types, _ = _make_runner(cfg, manifest, space)

    vspec = ValidationSpec(
        n_anomaly_types=get_typed(cfg, "search.val_types", 1),
        n_examples=get_typed(cfg, "search.val_examples", 20),
        seed=get_typed(cfg, "seed", 0),
    )
    val_ids = build_validation_set(anomaly_ids, anomaly_types, vspec)

    # Resume support: completed trials are journaled to trials.jsonl.
    log_path = out / "trials.jsonl"
    completed: dict[str, Trial] = {}
    if log_path.exists():
        for line in log_path.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            completed[rec["key"]] = Trial(**rec["trial"])

    log = open(log_path, "a", encoding="utf-8")

    def on_trial(key: str, trial: Trial):
        log.write(json.dumps({"key": key, "trial": asdict(trial)}) + "\n")
        log.flush()

    try:
        report = cross_validate(space, runner, n_normals, val_ids,
                                k_folds=get_typed(cfg, "search.k_folds", 3),
                                seed=get_typed(cfg, "seed", 0),
                                completed=completed, on_trial=on_trial)
    finally:
        log.close()
    (out / "search_report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "validation_ids.json").write_text(json.dumps(val_ids), encoding="utf-8")
    _write_config_echo(out, cfg)
    print(f"winner: {report.winner} (mean CV AUC {report.winner_mean_auc:.4f}) -> {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolved_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    space = _search_space(cfg)
    runner, n_normals, anomaly_ids, anomaly_types, extractor_for_spec = _make_runner(
        cfg, manifest, space)

    full_cfg = _train_cfg(cfg)
    loss_cfg = _loss_cfg(cfg)

    def evaluate_candidate(cand: Candidate) -> float:
        spec = cand.preprocess
        normals = runner.normal_images_by_spec[spec.key()]
        extractor = extractor_for_spec(spec)
        model_cfg = runner.model_cfg_for(cand)
        offset = cand.loss_stage - model_cfg.n_levels
        model, _ = train(normals, model_cfg, full_cfg, loss_cfg, extractor,
                         stage_offset=offset)
        stats = compute_stats(extractor, torch.as_tensor(normals), cand.loss_stage,
                              source="train-normals")
        test_imgs, test_labels, _ = load_split(manifest, "test", spec)
        scores = score_batch(model, extractor, stats,
                             torch.as_tensor(test_imgs, dtype=torch.float32),
                             cand.loss_stage, loss_cfg.epsilon)
        return roc_auc(scores=scores, labels=test_labels)

    types_grid = get_typed(cfg, "sweep.types", [1, 2])
    examples_grid = get_typed(cfg, "sweep.examples", [5, 20])
    grid = [(t, e) for t in types_grid for e in examples_grid]
    report = sensitivity_sweep(space, runner, n_normals, anomaly_ids, anomaly_types,
                               evaluate_candidate, grid,
                               repeats=get_typed(cfg, "sweep.repeats", 3),
                               k_folds=get_typed(cfg, "search.k_folds", 3),
                               seed=get_typed(cfg, "seed", 0))
    (out / "sweep.csv").write_text(report.to_csv(), encoding="utf-8")
    _write_config_echo(out, cfg)
    print(f"sweep grid ({len(grid)} cells) -> {out / 'sweep.csv'}")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(seed=args.seed, n_normal_train=args.n_normal,
                         n_normal_test=args.n_test_normal,
                         n_anomalous_test=args.n_test_anomalous,
                         n_anomalous_pool=args.n_pool,
                         resolution=args.resolution, subtlety=args.subtlety)
    manifest_path = generate_synthetic(spec, args.out)
    n_rows = sum(1 for _ in open(manifest_path)) - 1
    print(f"wrote {n_rows} samples -> {manifest_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perceptad",
                                description="Perceptual autoencoders for image anomaly detection")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, manifest=True, out=True, config=True):
        if config:
            sp.add_argument("--config", help="key=value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override a config key")
        if manifest:
            sp.add_argument("--manifest", required=True, help="dataset manifest CSV")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="allow non-empty output dir")

    for name in ("train", "train-flat"):
        sp = sub.add_parser(name, help="train a model on the manifest's train split")
        add_common(sp)

    sp = sub.add_parser("score", help="write per-sample anomaly scores as CSV")
    sp.add_argument("--run-dir", required=True, help="directory written by train")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val-pool", "test"])
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("eval", help="evaluate ROC AUC on a labeled split")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val-pool", "test"])
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("search", help="weakly-supervised hyperparameter search")
    add_common(sp)

    sp = sub.add_parser("sweep", help="validation-set sensitivity sweep")
    add_common(sp)

    sp = sub.add_parser("synth", help="generate the synthetic benchmark dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--resolution", type=int, default=32)
    sp.add_argument("--n-normal", type=int, default=2000)
    sp.add_argument("--n-test-normal", type=int, default=200)
    sp.add_argument("--n-test-anomalous", type=int, default=200)
    sp.add_argument("--n-pool", type=int, default=120)
    sp.add_argument("--subtlety", type=float, default=1.0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args, flat=False)
        if args.command == "train-flat":
            return cmd_train(args, flat=True)
        if args.command == "score":
            return cmd_score(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "search":
            return cmd_search(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "synth":
            return cmd_synth(args)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, CheckpointError) as e:
        _error_record("config", str(e))
        return EXIT_CONFIG
    except (ManifestError, FileNotFoundError) as e:
        _error_record("data", str(e))
        return EXIT_DATA
    except TrainingDivergedError as e:
        _error_record("numeric", str(e))
        return EXIT_NUMERIC
    except ValueError as e:
        _error_record("config", str(e))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
