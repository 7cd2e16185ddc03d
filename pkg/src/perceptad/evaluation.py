"""Anomaly scoring and threshold-free evaluation via ROC AUC."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .features import FeatureExtractor, FeatureStats
from .losses import relative_perceptual_l1, pixel_l1
from .model import Autoencoder

EVAL_REPORT_VERSION = 1


@dataclass
class ScoredSample:
    sample_id: str
    score: float
    label: int  # 0 = normal, 1 = anomalous

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not np.isfinite(self.score):
            raise ValueError(f"non-finite score for sample {self.sample_id}")


@dataclass
class EvalReport:
    roc_auc: float
    n_normal: int
    n_anomalous: int
    score_mean_normal: float
    score_mean_anomalous: float
    roc_curve: list = field(default_factory=list)  # (fpr, tpr) points
    format_version: int = EVAL_REPORT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def anomaly_score(model: Autoencoder, extractor: FeatureExtractor, stats: FeatureStats,
                  x: torch.Tensor, stage: int, epsilon: float = 1e-6) -> float:
    """Abnormality score of one image: the reconstruction loss itself.

    Higher means more anomalous.
    """
    if x.shape[-1] != model.config.target_resolution:
        raise ValueError(
            f"input resolution {x.shape[-1]} != model target {model.config.target_resolution}")
    with torch.no_grad():
        xr = model.reconstruct(x)
        return float(relative_perceptual_l1(x, xr, extractor, stats, stage, epsilon))


def score_batch(model: Autoencoder, extractor: FeatureExtractor, stats: FeatureStats,
                images: torch.Tensor, stage: int, epsilon: float = 1e-6,
                batch_size: int = 64, loss_kind: str = "perceptual") -> np.ndarray:
    """Per-sample anomaly scores for an (N, C, H, W) batch."""
    out = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            b = images[i:i + batch_size]
            xr = model.reconstruct(b)
            if loss_kind == "pixel_l1":
                s = pixel_l1(b, xr, reduce=False)
            else:
                s = relative_perceptual_l1(b, xr, extractor, stats, stage, epsilon, reduce=False)
            out.append(s.numpy())
    return np.concatenate(out)


def roc_auc(samples: Sequence[ScoredSample] | None = None, *,
            scores: np.ndarray | None = None, labels: np.ndarray | None = None) -> float:
    """ROC AUC as the Mann-Whitney statistic with midrank tie handling.

    Equals the fraction of (anomalous, normal) pairs where the anomalous
    score is higher, counting ties as 1/2.
    """
    if samples is not None:
        scores = np.array([s.score for s in samples], dtype=np.float64)
        labels = np.array([s.label for s in samples], dtype=np.int64)
    else:
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc requires at least one sample of each class")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve_points(scores: np.ndarray, labels: np.ndarray) -> list[tuple[float, float]]:
    """(FPR, TPR) points at every distinct threshold, descending."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    points = [(0.0, 0.0)]
    tp = fp = 0
    for i in range(len(s)):
        tp += int(y[i] == 1)
        fp += int(y[i] == 0)
        if i + 1 == len(s) or s[i + 1] != s[i]:
            points.append((fp / n_neg, tp / n_pos))
    return points


def evaluate(model: Autoencoder, extractor: FeatureExtractor, stats: FeatureStats,
             images: torch.Tensor, labels: np.ndarray, stage: int,
             epsilon: float = 1e-6, loss_kind: str = "perceptual") -> EvalReport:
    """Score every sample and compute the ROC AUC and curve."""
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] != len(labels):
        raise ValueError("images and labels length mismatch")
    scores = score_batch(model, extractor, stats, images, stage, epsilon, loss_kind=loss_kind)
    auc = roc_auc(scores=scores, labels=labels)
    return EvalReport(
        roc_auc=auc,
        n_normal=int((labels == 0).sum()),
        n_anomalous=int((labels == 1).sum()),
        score_mean_normal=float(scores[labels == 0].mean()),
        score_mean_anomalous=float(scores[labels == 1].mean()),
        roc_curve=roc_curve_points(scores, labels),
    )
