"""Weakly-supervised hyperparameter selection.

A small validation set of labeled anomalies with confined variability (few
anomaly types) drives a grid search with k-fold cross-validation over the
normal training data, maximizing ROC AUC. The sensitivity sweep measures
how the achieved test quality depends on the validation set's size and
variability.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .data import PreprocessSpec
from .evaluation import roc_auc, score_batch
from .features import FeatureExtractor, compute_stats
from .losses import LossConfig
from .model import ModelConfig
from .train import TrainConfig, TrainingDivergedError, train

SEARCH_REPORT_VERSION = 1


@dataclass
class ValidationSpec:
    n_anomaly_types: int = 1
    n_examples: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_anomaly_types < 1 or self.n_examples < 1:
            raise ValueError("n_anomaly_types and n_examples must be >= 1")


def build_validation_set(anomaly_ids: list[str], anomaly_types: list[str],
                         spec: ValidationSpec) -> list[str]:
    """Pick a confined-variability validation set: ids only, no pixel copies.

    Selects ``n_anomaly_types`` types uniformly at random (seeded), then
    draws ``n_examples`` total from those types as evenly as possible.
    """
    if len(anomaly_ids) != len(anomaly_types):
        raise ValueError("ids and types length mismatch")
    by_type: dict[str, list[str]] = {}
    for sid, t in zip(anomaly_ids, anomaly_types):
        by_type.setdefault(t, []).append(sid)
    types = sorted(by_type)
    if len(types) < spec.n_anomaly_types:
        raise ValueError(
            f"pool has {len(types)} anomaly types, need {spec.n_anomaly_types}")
    rng = np.random.default_rng(spec.seed)
    chosen_types = list(rng.choice(types, size=spec.n_anomaly_types, replace=False))
    base, extra = divmod(spec.n_examples, len(chosen_types))
    selected = []
    for i, t in enumerate(chosen_types):
        want = base + (1 if i < extra else 0)
        pool = by_type[t]
        if len(pool) < want:
            raise ValueError(f"anomaly type {t!r} has {len(pool)} examples, need {want}")
        selected.extend(rng.choice(pool, size=want, replace=False))
    return [str(s) for s in selected]


@dataclass(frozen=True)
class Candidate:
    bottleneck_dim: int
    loss_stage: int
    preprocess: PreprocessSpec

    def sort_key(self):
        # Tie-break order: smallest bottleneck, shallowest stage, lexicographic preprocessing.
        return (self.bottleneck_dim, self.loss_stage, self.preprocess.key())

    def to_dict(self) -> dict:
        return {"bottleneck_dim": self.bottleneck_dim, "loss_stage": self.loss_stage,
                "preprocess": asdict(self.preprocess)}


@dataclass
class SearchSpace:
    bottleneck_dims: list[int]
    loss_stages: list[int]
    preprocess_specs: list[PreprocessSpec]

    def __post_init__(self):
        if not (self.bottleneck_dims and self.loss_stages and self.preprocess_specs):
            raise ValueError("search space must be non-empty along every axis")

    def candidates(self) -> list[Candidate]:
        return [Candidate(b, s, p) for b, s, p in itertools.product(
            self.bottleneck_dims, self.loss_stages, self.preprocess_specs)]


@dataclass
class Trial:
    candidate: dict
    fold_aucs: list = field(default_factory=list)
    mean_auc: float = float("nan")
    failed: bool = False
    error: str = ""


@dataclass
class SearchReport:
    trials: list = field(default_factory=list)
    winner: dict | None = None
    winner_mean_auc: float = float("nan")
    tie_break_note: str = ""
    format_version: int = SEARCH_REPORT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


class TrialRunner:
    """Trains and scores one candidate configuration on one normal subset.

    ``images_by_spec`` maps a PreprocessSpec key to preprocessed image
    arrays indexed consistently with the id lists, so each candidate sees
    its own preprocessing.
    """

    def __init__(self, extractor_for_spec, base_model_cfg: ModelConfig,
                 trial_train_cfg: TrainConfig, loss_cfg: LossConfig,
                 normal_images_by_spec: dict[str, np.ndarray],
                 anomaly_images_by_spec: dict[str, np.ndarray],
                 anomaly_ids: list[str]):
        self.extractor_for_spec = extractor_for_spec
        self.base_model_cfg = base_model_cfg
        self.trial_train_cfg = trial_train_cfg
        self.loss_cfg = loss_cfg
        self.normal_images_by_spec = normal_images_by_spec
        self.anomaly_images_by_spec = anomaly_images_by_spec
        self.anomaly_index = {sid: i for i, sid in enumerate(anomaly_ids)}

    def model_cfg_for(self, cand: Candidate) -> ModelConfig:
        d = self.base_model_cfg.to_dict()
        d["bottleneck_dim"] = cand.bottleneck_dim
        d["target_resolution"] = cand.preprocess.target_resolution
        d["input_channels"] = 1 if cand.preprocess.grayscale or d["input_channels"] == 1 else 3
        return ModelConfig(**d)

    def fit_and_score(self, cand: Candidate, train_idx: np.ndarray,
                      heldout_normal_idx: np.ndarray, validation_ids: list[str],
                      seed: int) -> float:
        key = cand.preprocess.key()
        normals = self.normal_images_by_spec[key]
        anomalies = self.anomaly_images_by_spec[key]
        extractor = self.extractor_for_spec(cand.preprocess)
        model_cfg = self.model_cfg_for(cand)
        cfg = TrainConfig(**{**asdict(self.trial_train_cfg), "seed": seed})
        # stage_offset aligns the deepest training-loss stage with the candidate's stage.
        offset = cand.loss_stage - model_cfg.n_levels
        model, _ = train(normals[train_idx], model_cfg, cfg, self.loss_cfg, extractor,
                         stage_offset=offset)
        stage = cand.loss_stage
        bank_images = torch.as_tensor(normals[train_idx], dtype=torch.float32)
        stats = compute_stats(extractor, bank_images, stage, source="trial-normals")
        val_idx = np.array([self.anomaly_index[v] for v in validation_ids])
        imgs = np.concatenate([normals[heldout_normal_idx], anomalies[val_idx]])
        labels = np.concatenate([np.zeros(len(heldout_normal_idx), dtype=np.int64),
                                 np.ones(len(val_idx), dtype=np.int64)])
        scores = score_batch(model, extractor, stats, torch.as_tensor(imgs, dtype=torch.float32),
                             stage, self.loss_cfg.epsilon)
        return roc_auc(scores=scores, labels=labels)


def kfold_indices(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded k-fold split of range(n); returns (train_idx, heldout_idx) pairs."""
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        held = folds[i]
        tr = np.concatenate([folds[j] for j in range(k) if j != i])
        out.append((tr, held))
    return out


def cross_validate(space: SearchSpace, runner: TrialRunner, n_normals: int,
                   validation_ids: list[str], k_folds: int = 3, seed: int = 0,
                   completed: dict[str, Trial] | None = None,
                   on_trial=None) -> SearchReport:
    """Grid search with k-fold CV over normals, ranking by mean ROC AUC.

    Validation anomalies are reused across folds (they are scarce by
    premise); only the normals are folded. Failed trials are excluded from
    ranking but recorded. ``completed`` allows resuming: trials keyed by
    candidate JSON are skipped.
    """
    folds = kfold_indices(n_normals, k_folds, seed)
    report = SearchReport()
    ranked: list[tuple[float, tuple, Candidate]] = []
    completed = completed or {}
    for cand in space.candidates():
        key = json.dumps(cand.to_dict(), sort_keys=True)
        if key in completed:
            trial = completed[key]
        else:
            trial = Trial(candidate=cand.to_dict())
            try:
                for fold_i, (tr, held) in enumerate(folds):
                    auc = runner.fit_and_score(cand, tr, held, validation_ids,
                                               seed=seed + fold_i)
                    trial.fold_aucs.append(auc)
                trial.mean_auc = float(np.mean(trial.fold_aucs))
            except (TrainingDivergedError, ValueError) as e:
                trial.failed = True
                trial.error = str(e)
            if on_trial is not None:
                on_trial(key, trial)
        report.trials.append(trial)
        if not trial.failed:
            ranked.append((trial.mean_auc, cand.sort_key(), cand))
    if not ranked:
        raise RuntimeError("every trial failed; no winner")
    best_auc = max(r[0] for r in ranked)
    contenders = sorted((r for r in ranked if r[0] == best_auc), key=lambda r: r[1])
    winner = contenders[0][2]
    report.winner = winner.to_dict()
    report.winner_mean_auc = best_auc
    if len(contenders) > 1:
        report.tie_break_note = (
            f"{len(contenders)} trials tied at mean AUC {best_auc:.6f}; picked smallest "
            "bottleneck, then shallowest stage, then lexicographic preprocessing")
    return report


@dataclass
class SweepCell:
    n_types: int
    n_examples: int
    test_aucs: list
    mean_auc: float
    std_auc: float


@dataclass
class SweepReport:
    cells: list = field(default_factory=list)
    grid_max_auc: float = float("nan")
    grid_min_auc: float = float("nan")

    def to_csv(self) -> str:
        """Grid CSV: rows = n_examples, columns = n_types, cells = mean+-std."""
        types = sorted({c.n_types for c in self.cells})
        examples = sorted({c.n_examples for c in self.cells})
        by_key = {(c.n_types, c.n_examples): c for c in self.cells}
        lines = ["n_examples," + ",".join(f"types={t}" for t in types)]
        for e in examples:
            row = [str(e)]
            for t in types:
                c = by_key.get((t, e))
                row.append(f"{c.mean_auc:.4f}+-{c.std_auc:.4f}" if c else "")
            lines.append(",".join(row))
        lines.append(f"grid_max,{self.grid_max_auc:.4f}")
        lines.append(f"grid_min,{self.grid_min_auc:.4f}")
        return "\n".join(lines) + "\n"


def sensitivity_sweep(space: SearchSpace, runner: TrialRunner, n_normals: int,
                      anomaly_ids: list[str], anomaly_types: list[str],
                      evaluate_candidate, grid: list[tuple[int, int]],
                      repeats: int = 3, k_folds: int = 3, seed: int = 0) -> SweepReport:
    """Sensitivity sweep over validation-set (n_types, n_examples) cells.

    ``evaluate_candidate(candidate) -> test AUC`` trains the candidate on
    all normals at full budget and evaluates on the test split; it is also
    used to compute the exhaustive grid max/min reference.
    """
    test_auc_cache: dict[str, float] = {}

    def test_auc(cand: Candidate) -> float:
        key = json.dumps(cand.to_dict(), sort_keys=True)
        if key not in test_auc_cache:
            test_auc_cache[key] = evaluate_candidate(cand)
        return test_auc_cache[key]

    all_aucs = [test_auc(c) for c in space.candidates()]
    report = SweepReport(grid_max_auc=float(max(all_aucs)), grid_min_auc=float(min(all_aucs)))

    for n_types, n_examples in grid:
        aucs = []
        for rep in range(repeats):
            vspec = ValidationSpec(n_anomaly_types=n_types, n_examples=n_examples,
                                   seed=seed * 1000 + rep)
            val_ids = build_validation_set(anomaly_ids, anomaly_types, vspec)
            cv = cross_validate(space, runner, n_normals, val_ids, k_folds=k_folds, seed=seed)
            winner = next(c for c in space.candidates()
                          if c.to_dict() == cv.winner)
            aucs.append(test_auc(winner))
        report.cells.append(SweepCell(
            n_types=n_types, n_examples=n_examples, test_aucs=aucs,
            mean_auc=float(np.mean(aucs)),
            std_auc=float(np.std(aucs)) if len(aucs) > 1 else 0.0))
    return report
