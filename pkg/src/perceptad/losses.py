"""Relative perceptual L1 loss, its progressive blended form, and helpers.

The reconstruction loss between an image x and its reconstruction xr is

    || norm(f(x)) - norm(f(xr)) ||_1 / (|| norm(f(x)) ||_1 + epsilon)

where f is a frozen feature extractor stage and norm applies precomputed
per-channel mean/std. During progressive growing the loss is a convex
combination of this term at two consecutive extractor stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .features import FeatureExtractor, FeatureStats, normalize

DEFAULT_EPSILON = 1e-6


@dataclass
class LossConfig:
    stage_for_level: dict[int, int] = field(default_factory=dict)
    epsilon: float = DEFAULT_EPSILON
    l1_weight: float = 0.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be >= 0")


def down(x: torch.Tensor) -> torch.Tensor:
    """2x2 average pooling per channel; accepts (C, H, W) or (N, C, H, W)."""
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError(f"down requires even spatial dims, got {tuple(x.shape[-2:])}")
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    out = F.avg_pool2d(x, kernel_size=2)
    return out[0] if squeeze else out


def upsample2(x: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor x2 upsampling; exact right-inverse of down()."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    out = F.interpolate(x, scale_factor=2, mode="nearest")
    return out[0] if squeeze else out


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.ndim == 3 else x


def relative_l1_from_features(fx_hat: torch.Tensor, fr_hat: torch.Tensor,
                              epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """Relative L1 on already-normalized feature batches; returns per-sample values."""
    dims = tuple(range(1, fx_hat.ndim))
    num = (fx_hat - fr_hat).abs().sum(dim=dims)
    den = fx_hat.abs().sum(dim=dims)
    return num / (den + epsilon)


def relative_perceptual_l1(x: torch.Tensor, xr: torch.Tensor, extractor: FeatureExtractor,
                           stats: FeatureStats, stage: int,
                           epsilon: float = DEFAULT_EPSILON, reduce: bool = True) -> torch.Tensor:
    """Relative perceptual L1 between x and xr at one extractor stage.

    Inputs are (C, H, W) or (N, C, H, W); with ``reduce`` the batch mean is
    returned, otherwise per-sample values.
    """
    if x.shape != xr.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(xr.shape)}")
    if stats is None:
        raise ValueError(f"missing stats for stage {stage}")
    xb, rb = _as_batch(x), _as_batch(xr)
    fx_hat = normalize(extractor.extract_batch(xb, stage), stats, fm_stage=stage)
    fr_hat = normalize(extractor.extract_batch(rb, stage), stats, fm_stage=stage)
    per_sample = relative_l1_from_features(fx_hat, fr_hat, epsilon)
    return per_sample.mean() if reduce else per_sample


def blended_loss(x: torch.Tensor, xr: torch.Tensor, alpha: float, extractor: FeatureExtractor,
                 stats_low: FeatureStats | None, stats_high: FeatureStats,
                 stage_low: int, stage_high: int,
                 epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """Fade-in loss: alpha * L(stage_high on x) + (1-alpha) * L(stage_low on down(x)).

    At alpha=1 only the high-resolution term is evaluated; at alpha=0 only
    the low-resolution term. Requires even spatial dims whenever alpha < 1.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return relative_perceptual_l1(x, xr, extractor, stats_high, stage_high, epsilon)
    low = relative_perceptual_l1(down(x), down(xr), extractor, stats_low, stage_low, epsilon)
    if alpha == 0.0:
        return low
    high = relative_perceptual_l1(x, xr, extractor, stats_high, stage_high, epsilon)
    return alpha * high + (1.0 - alpha) * low


def combined_loss(x: torch.Tensor, xr: torch.Tensor, extractor: FeatureExtractor,
                  stats: FeatureStats, stage: int, cfg: LossConfig) -> torch.Tensor:
    """Perceptual term plus optional pixel-L1 term (mean absolute difference)."""
    perceptual = relative_perceptual_l1(x, xr, extractor, stats, stage, cfg.epsilon)
    if cfg.l1_weight == 0.0:
        return perceptual
    return perceptual + cfg.l1_weight * (x - xr).abs().mean()


def pixel_l1(x: torch.Tensor, xr: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    """Plain mean-absolute-pixel-difference loss (the ablation baseline)."""
    if x.shape != xr.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(xr.shape)}")
    xb, rb = _as_batch(x), _as_batch(xr)
    dims = tuple(range(1, xb.ndim))
    per_sample = (xb - rb).abs().mean(dim=dims)
    return per_sample.mean() if reduce else per_sample
