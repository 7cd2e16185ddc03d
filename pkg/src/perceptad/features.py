"""Multi-stage convolutional feature extractors with per-channel normalization stats.

An extractor exposes a fixed number of stages; stage k produces activations
downsampled by 2**(k+1) relative to the input (stage 0 -> factor 2, stage 1
-> factor 4, ...). Parameters are frozen: nothing in this package ever
trains or mutates an extractor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

SIGMA_FLOOR = 1e-4

STATS_FORMAT_VERSION = 1


class StageError(ValueError):
    """Unknown stage index or stage mismatch."""


@dataclass(frozen=True)
class StageSpec:
    index: int
    downsample: int
    channels: int


@dataclass
class FeatureStats:
    """Per-channel mean/std of one stage's responses, pooled over space and images."""

    stage: int
    mu: np.ndarray
    sigma: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise ValueError("mu and sigma must be 1-D vectors of equal length")
        if np.any(self.sigma < SIGMA_FLOOR):
            raise ValueError(f"sigma entries must be >= {SIGMA_FLOOR}")

    @property
    def channels(self) -> int:
        return self.mu.shape[0]


def unit_stats(stage: int, channels: int) -> FeatureStats:
    """Identity normalization (mu=0, sigma=1)."""
    return FeatureStats(stage=stage, mu=np.zeros(channels), sigma=np.ones(channels), source="unit")


class FeatureExtractor:
    """Base class: frozen multi-stage feature extractor.

    Subclasses implement ``_forward(image, stage)`` on a (C, H, W) torch
    tensor and declare ``stages`` and ``input_channels``.
    """

    stages: Sequence[StageSpec]
    input_channels: int
    provenance: str

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def stage_spec(self, stage: int) -> StageSpec:
        if not (0 <= stage < len(self.stages)):
            raise StageError(f"unknown stage index {stage}; extractor has {len(self.stages)} stages")
        return self.stages[stage]

    def extract(self, image: torch.Tensor, stage: int) -> torch.Tensor:
        """Return stage activations for a single (C, H, W) image."""
        spec = self.stage_spec(stage)
        if image.ndim != 3:
            raise ValueError(f"expected (C, H, W) image, got shape {tuple(image.shape)}")
        return self.extract_batch(image.unsqueeze(0), stage)[0]

    def extract_batch(self, images: torch.Tensor, stage: int) -> torch.Tensor:
        """Return stage activations for a (N, C, H, W) batch."""
        spec = self.stage_spec(stage)
        if images.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) batch, got shape {tuple(images.shape)}")
        n, c, h, w = images.shape
        if c != self.input_channels:
            raise ValueError(f"extractor expects {self.input_channels} input channels, got {c}")
        if h % spec.downsample or w % spec.downsample:
            raise ValueError(
                f"input size {h}x{w} not divisible by stage {stage} downsample factor {spec.downsample}"
            )
        return self._forward(images, stage)

    def _forward(self, images: torch.Tensor, stage: int) -> torch.Tensor:
        raise NotImplementedError


class FixedRandomExtractor(FeatureExtractor):
    """Seeded random convolutional extractor (no pretrained weights needed).

    Stage k applies k+1 stride-2 conv blocks, so its downsample factor is
    2**(k+1). Biases are zero and weights are frozen; the whole thing is a
    deterministic function of the seed.
    """

    provenance = "fixed-random"

    def __init__(self, seed: int, n_stages: int = 3, channels_per_stage: Sequence[int] = (32, 64, 128),
                 input_channels: int = 1):
        if n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if len(channels_per_stage) < n_stages:
            raise ValueError("need a channel count for every stage")
        self.seed = seed
        self.input_channels = input_channels
        self.stages = tuple(
            StageSpec(index=k, downsample=2 ** (k + 1), channels=channels_per_stage[k])
            for k in range(n_stages)
        )
        gen = torch.Generator().manual_seed(seed)
        blocks = []
        in_ch = input_channels
        for spec in self.stages:
            conv1 = nn.Conv2d(in_ch, spec.channels, 3, stride=1, padding=1, bias=False)
            conv2 = nn.Conv2d(spec.channels, spec.channels, 3, stride=2, padding=1, bias=False)
            for conv in (conv1, conv2):
                nn.init.kaiming_normal_(conv.weight, a=0.2, generator=gen)
            blocks.append(nn.Sequential(conv1, nn.LeakyReLU(0.2), conv2, nn.LeakyReLU(0.2)))
            in_ch = spec.channels
        self._net = nn.ModuleList(blocks)
        self._net.requires_grad_(False)
        self._net.eval()

    def to_dtype(self, dtype: torch.dtype) -> "FixedRandomExtractor":
        self._net.to(dtype)
        return self

    def _forward(self, images: torch.Tensor, stage: int) -> torch.Tensor:
        h = images
        for k in range(stage + 1):
            h = self._net[k](h)
        return h


class CallableExtractor(FeatureExtractor):
    """Adapter for an externally supplied (pretrained) feature extractor.

    The host provides ``fn(images, stage) -> activations`` operating on
    (N, C, H, W) batches, plus the stage descriptors. The adapter never
    parses foreign weight formats.
    """

    provenance = "pretrained-classifier"

    def __init__(self, fn: Callable[[torch.Tensor, int], torch.Tensor],
                 stages: Sequence[StageSpec], input_channels: int):
        self._fn = fn
        self.stages = tuple(stages)
        self.input_channels = input_channels

    def _forward(self, images: torch.Tensor, stage: int) -> torch.Tensor:
        out = self._fn(images, stage)
        spec = self.stage_spec(stage)
        expected = (images.shape[0], spec.channels,
                    images.shape[2] // spec.downsample, images.shape[3] // spec.downsample)
        if tuple(out.shape) != expected:
            raise ValueError(f"adapter returned shape {tuple(out.shape)}, expected {expected}")
        return out


def make_fixed_random_extractor(seed: int, n_stages: int = 3,
                                channels_per_stage: Sequence[int] = (32, 64, 128),
                                input_channels: int = 1) -> FixedRandomExtractor:
    return FixedRandomExtractor(seed, n_stages, channels_per_stage, input_channels)


def compute_stats(extractor: FeatureExtractor, dataset: Iterable[torch.Tensor], stage: int,
                  source: str = "", batch_size: int = 32) -> FeatureStats:
    """Pooled per-channel mean/std of stage responses over a dataset of images.

    Accumulates in float64 so the result is order-insensitive to ~1e-6
    relative. Sigma is floored at SIGMA_FLOOR.
    """
    spec = extractor.stage_spec(stage)
    total = np.zeros(spec.channels, dtype=np.float64)
    total_sq = np.zeros(spec.channels, dtype=np.float64)
    count = 0
    batch: list[torch.Tensor] = []

    def flush(batch):
        nonlocal count
        fm = extractor.extract_batch(torch.stack(batch), stage).to(torch.float64)
        total[:] += fm.sum(dim=(0, 2, 3)).numpy()
        total_sq[:] += (fm * fm).sum(dim=(0, 2, 3)).numpy()
        count += fm.shape[0] * fm.shape[2] * fm.shape[3]

    for img in dataset:
        batch.append(torch.as_tensor(img))
        if len(batch) == batch_size:
            flush(batch)
            batch = []
    if batch:
        flush(batch)
    if count == 0:
        raise ValueError("compute_stats: empty dataset")
    mu = total / count
    var = np.maximum(total_sq / count - mu * mu, 0.0)
    sigma = np.maximum(np.sqrt(var), SIGMA_FLOOR)
    return FeatureStats(stage=stage, mu=mu, sigma=sigma, source=source)


def normalize(fm: torch.Tensor, stats: FeatureStats, fm_stage: int | None = None) -> torch.Tensor:
    """Per-channel affine normalization (x - mu) / sigma.

    ``fm`` is (C, H, W) or (N, C, H, W). If ``fm_stage`` is given it must
    match the stats' stage.
    """
    if fm_stage is not None and fm_stage != stats.stage:
        raise StageError(f"feature map stage {fm_stage} != stats stage {stats.stage}")
    ch_axis = 0 if fm.ndim == 3 else 1
    if fm.shape[ch_axis] != stats.channels:
        raise ValueError(f"channel count {fm.shape[ch_axis]} != stats channels {stats.channels}")
    shape = [1] * fm.ndim
    shape[ch_axis] = stats.channels
    mu = torch.as_tensor(stats.mu, dtype=fm.dtype).reshape(shape)
    sigma = torch.as_tensor(stats.sigma, dtype=fm.dtype).reshape(shape)
    return (fm - mu) / sigma


def save_stats(path, stats_list: Sequence[FeatureStats]) -> None:
    """Write stats for one or more stages to an .npz container."""
    payload = {"format_version": np.int64(STATS_FORMAT_VERSION),
               "stages": np.array([s.stage for s in stats_list], dtype=np.int64),
               "sources": np.array([s.source for s in stats_list])}
    for s in stats_list:
        payload[f"mu_{s.stage}"] = s.mu
        payload[f"sigma_{s.stage}"] = s.sigma
    np.savez(path, **payload)


def load_stats(path) -> dict[int, FeatureStats]:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != STATS_FORMAT_VERSION:
            raise ValueError(f"stats file format version {version}, expected {STATS_FORMAT_VERSION}")
        out = {}
        for stage, source in zip(z["stages"], z["sources"]):
            stage = int(stage)
            out[stage] = FeatureStats(stage=stage, mu=z[f"mu_{stage}"],
                                      sigma=z[f"sigma_{stage}"], source=str(source))
    return out
