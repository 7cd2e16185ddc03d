"""Training loop: progressive (or flat) gradient descent on normal data only.

Each resolution level gets a fixed step budget. Within a level the fade
coefficient alpha rises linearly from 0 to 1 over the first
``fade_fraction`` of the budget (level 0 never fades). Hold-out early
stopping applies on the final level once the fade is complete; the returned
model carries the weights with the best hold-out loss.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .features import FeatureExtractor, FeatureStats, compute_stats
from .losses import LossConfig, blended_loss, down, pixel_l1, relative_perceptual_l1
from .model import Autoencoder, BlendState, ModelConfig, blend_input

TRAIN_REPORT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss became NaN/Inf; carries the partial TrainReport."""

    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    steps_per_level: int = 2000
    fade_fraction: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 32
    holdout_fraction: float = 0.1
    patience: int = 5
    rel_improve_tol: float = 1e-3
    eval_every: int = 100
    seed: int = 0
    loss_kind: str = "perceptual"  # "perceptual" or "pixel_l1" (ablation baseline)
    deterministic: bool = True

    def __post_init__(self):
        if not (0 < self.fade_fraction <= 1):
            raise ValueError("fade_fraction must be in (0, 1]")
        if not (0 < self.holdout_fraction < 1):
            raise ValueError("holdout_fraction must be in (0, 1)")
        if min(self.steps_per_level, self.batch_size, self.patience, self.eval_every) < 1:
            raise ValueError("steps_per_level, batch_size, patience, eval_every must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss_kind not in ("perceptual", "pixel_l1"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")


@dataclass
class TrainReport:
    config: dict
    loss_trace: list = field(default_factory=list)
    level_boundaries: list = field(default_factory=list)  # (step, level) at level start
    holdout_evals: list = field(default_factory=list)     # (step, holdout_loss)
    stopping_step: int = -1
    best_step: int = -1
    final_holdout_loss: float = float("nan")
    diverged: bool = False
    format_version: int = TRAIN_REPORT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        d = json.loads(text)
        d["level_boundaries"] = [tuple(b) for b in d["level_boundaries"]]
        d["holdout_evals"] = [tuple(b) for b in d["holdout_evals"]]
        return cls(**d)


def alpha_at(step_within_level: int, level: int, cfg: TrainConfig) -> BlendState:
    """Linear fade schedule; level 0 is always fully faded in."""
    if level == 0:
        return BlendState(level=0, alpha=1.0)
    fade_steps = cfg.fade_fraction * cfg.steps_per_level
    alpha = min(1.0, step_within_level / fade_steps)
    return BlendState(level=level, alpha=alpha)


def level_stage(level: int, n_stages: int, stage_offset: int = 0) -> int:
    """Monotone level -> extractor stage mapping, clamped to the valid stage range."""
    if level < 0:
        raise ValueError("level must be >= 0")
    return min(max(level + stage_offset, 0), n_stages - 1)


def downsample_to(images: torch.Tensor, resolution: int) -> torch.Tensor:
    """Repeated 2x average pooling down to the requested resolution."""
    out = images
    while out.shape[-1] > resolution:
        out = down(out)
    if out.shape[-1] != resolution:
        raise ValueError(f"cannot reach resolution {resolution} from {images.shape[-1]}")
    return out


class _StatsBank:
    """Lazily computed FeatureStats per extractor stage.

    Stats for stage s are pooled over the training normals downsampled to
    the resolution where that stage first becomes the active loss stage.
    """

    def __init__(self, extractor: FeatureExtractor, train_images: torch.Tensor,
                 model_cfg: ModelConfig, stage_offset: int = 0,
                 override: dict[int, FeatureStats] | None = None):
        self.extractor = extractor
        self.train_images = train_images
        self.model_cfg = model_cfg
        self.stage_offset = stage_offset
        self._cache: dict[int, FeatureStats] = dict(override or {})

    def resolution_for_stage(self, stage: int) -> int:
        level = max(0, min(stage - self.stage_offset, self.model_cfg.n_levels))
        return self.model_cfg.resolution_at(level)

    def get(self, stage: int) -> FeatureStats:
        if stage not in self._cache:
            imgs = downsample_to(self.train_images, self.resolution_for_stage(stage))
            self._cache[stage] = compute_stats(self.extractor, imgs, stage, source="train-normals")
        return self._cache[stage]


def _holdout_split(n: int, holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_hold = max(1, int(round(n * holdout_fraction)))
    if n_hold >= n:
        raise ValueError("dataset too small for the requested holdout fraction")
    return perm[n_hold:], perm[:n_hold]


def _batch_loss(model: Autoencoder, batch: torch.Tensor, blend: BlendState,
                extractor: FeatureExtractor, bank: _StatsBank, loss_cfg: LossConfig,
                stage_lo: int, stage_hi: int, loss_kind: str) -> torch.Tensor:
    xb = blend_input(batch, blend.alpha) if blend.level > 0 else batch
    xr = model.reconstruct(xb, blend)
    if loss_kind == "pixel_l1":
        return pixel_l1(xb, xr)
    if blend.level == 0 or blend.alpha == 1.0:
        loss = relative_perceptual_l1(xb, xr, extractor, bank.get(stage_hi), stage_hi,
                                      loss_cfg.epsilon)
    else:
        loss = blended_loss(xb, xr, blend.alpha, extractor, bank.get(stage_lo),
                            bank.get(stage_hi), stage_lo, stage_hi, loss_cfg.epsilon)
    if loss_cfg.l1_weight > 0:
        loss = loss + loss_cfg.l1_weight * (xb - xr).abs().mean()
    return loss


def train(data: np.ndarray | torch.Tensor, model_cfg: ModelConfig, train_cfg: TrainConfig,
          loss_cfg: LossConfig, extractor: FeatureExtractor,
          stage_offset: int = 0, stats_override: dict[int, FeatureStats] | None = None,
          flat: bool = False) -> tuple[Autoencoder, TrainReport]:
    """Train an autoencoder on normal-only data.

    ``data`` is (N, C, H, W) at the target resolution, values in [0, 1].
    With ``flat`` the progressive schedule collapses to a single phase at
    the target resolution using the deepest configured loss stage.
    """
    images = torch.as_tensor(data, dtype=torch.float32)
    if images.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) data, got shape {tuple(images.shape)}")
    if images.shape[-1] != model_cfg.target_resolution:
        raise ValueError(
            f"data resolution {images.shape[-1]} != target_resolution {model_cfg.target_resolution}")
    if images.shape[0] < 2:
        raise ValueError("dataset too small to train on")

    if train_cfg.deterministic:
        torch.set_num_threads(1)

    train_idx, hold_idx = _holdout_split(images.shape[0], train_cfg.holdout_fraction,
                                         train_cfg.seed)
    train_images, hold_images = images[train_idx], images[hold_idx]

    model = Autoencoder(model_cfg, seed=train_cfg.seed)
    bank = _StatsBank(extractor, train_images, model_cfg, stage_offset, stats_override)
    report = TrainReport(config={"model": model_cfg.to_dict(), "train": asdict(train_cfg),
                                 "loss": {"epsilon": loss_cfg.epsilon,
                                          "l1_weight": loss_cfg.l1_weight},
                                 "flat": flat, "stage_offset": stage_offset})

    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    n_stages = extractor.n_stages
    L = model_cfg.n_levels
    levels = [L] if flat else list(range(L + 1))
    if flat:
        model.blend = BlendState(level=L, alpha=1.0)

    best_state = None
    best_loss = float("inf")
    best_step = -1
    global_step = 0

    def holdout_loss(blend: BlendState, level_images: torch.Tensor,
                     stage_lo: int, stage_hi: int) -> float:
        total, count = 0.0, 0
        with torch.no_grad():
            for i in range(0, level_images.shape[0], train_cfg.batch_size):
                b = level_images[i:i + train_cfg.batch_size]
                total += float(_batch_loss(model, b, blend, extractor, bank, loss_cfg,
                                           stage_lo, stage_hi, train_cfg.loss_kind)) * b.shape[0]
                count += b.shape[0]
        return total / count

    for level in levels:
        if not flat and level > 0:
            model.grow()
        stage_hi = level_stage(level, n_stages, stage_offset)
        stage_lo = level_stage(max(level - 1, 0), n_stages, stage_offset)
        res = model_cfg.resolution_at(level)
        level_train = downsample_to(train_images, res)
        level_hold = downsample_to(hold_images, res)
        report.level_boundaries.append((global_step, level))

        is_final = level == levels[-1]
        bad_evals = 0
        level_best = float("inf")

        for step in range(train_cfg.steps_per_level):
            blend = BlendState(level=L, alpha=1.0) if flat else alpha_at(step, level, train_cfg)
            model.blend = blend
            idx = torch.randint(0, level_train.shape[0], (train_cfg.batch_size,), generator=gen)
            batch = level_train[idx]
            opt.zero_grad()
            loss = _batch_loss(model, batch, blend, extractor, bank, loss_cfg,
                               stage_lo, stage_hi, train_cfg.loss_kind)
            if not torch.isfinite(loss):
                report.stopping_step = global_step
                report.diverged = True
                raise TrainingDivergedError(
                    f"non-finite loss at step {global_step} (level {level}, alpha {blend.alpha:.3f})",
                    report)
            loss.backward()
            opt.step()
            report.loss_trace.append(float(loss.detach()))
            global_step += 1

            faded = blend.alpha == 1.0
            if faded and global_step % train_cfg.eval_every == 0:
                h = holdout_loss(blend, level_hold, stage_lo, stage_hi)
                report.holdout_evals.append((global_step, h))
                if is_final and h < best_loss:
                    best_loss, best_step = h, global_step
                    best_state = copy.deepcopy(model.state_dict())
                if h < level_best * (1.0 - train_cfg.rel_improve_tol):
                    level_best = h
                    bad_evals = 0
                else:
                    bad_evals += 1
                    if bad_evals >= train_cfg.patience:
                        break

    report.stopping_step = global_step
    if best_state is not None:
        model.load_state_dict(best_state)
        report.best_step = best_step
        report.final_holdout_loss = best_loss
    else:
        # No eval ever ran on the final level (tiny budgets); keep last weights.
        final_blend = model.blend
        stage_hi = level_stage(levels[-1], n_stages, stage_offset)
        stage_lo = level_stage(max(levels[-1] - 1, 0), n_stages, stage_offset)
        h = holdout_loss(final_blend, downsample_to(hold_images, model_cfg.target_resolution),
                         stage_lo, stage_hi)
        report.holdout_evals.append((global_step, h))
        report.best_step = global_step
        report.final_holdout_loss = h
    model.blend = BlendState(level=levels[-1], alpha=1.0)
    return model, report


def train_flat(data, model_cfg: ModelConfig, train_cfg: TrainConfig, loss_cfg: LossConfig,
               extractor: FeatureExtractor, stage_offset: int = 0,
               stats_override: dict[int, FeatureStats] | None = None
               ) -> tuple[Autoencoder, TrainReport]:
    """Single-phase training at the target resolution (no progressive growing)."""
    return train(data, model_cfg, train_cfg, loss_cfg, extractor,
                 stage_offset=stage_offset, stats_override=stats_override, flat=True)
