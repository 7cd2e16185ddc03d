"""Progressive-growing convolutional autoencoder with pre-activation residual blocks.

The network always owns parameters for every level up to the target
resolution; levels above the current BlendState are inert. Growing is
therefore a pure schedule change (level += 1, alpha = 0) that leaves every
existing parameter untouched, and a flat run at the target resolution uses
the exact same parameter set as a progressive run with the same seed.

Fade-in follows progressive-growing practice: at level k with fade
coefficient alpha, the encoder blends the new high-resolution input path
with the previous level's path applied to the 2x-downsampled input, and the
decoder blends the new high-resolution output with the upsampled previous
output. At alpha=0 the model computes exactly
upsample(reconstruct_at_level_(k-1)(down(x))).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import torch
from torch import nn

from .losses import down, upsample2

CHECKPOINT_MAGIC = b"PADCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt checkpoint file or format version mismatch."""


@dataclass(frozen=True)
class ModelConfig:
    target_resolution: int
    base_resolution: int = 8
    bottleneck_dim: int = 64
    base_channels: int = 32
    min_channels: int = 8
    input_channels: int = 1

    def __post_init__(self):
        if self.bottleneck_dim < 1:
            raise ValueError("bottleneck_dim must be >= 1")
        if self.input_channels not in (1, 3):
            raise ValueError("input_channels must be 1 or 3")
        r, levels = self.base_resolution, 0
        while r < self.target_resolution:
            r *= 2
            levels += 1
        if r != self.target_resolution:
            raise ValueError(
                f"target_resolution {self.target_resolution} is not base_resolution "
                f"{self.base_resolution} times a power of two"
            )

    @property
    def n_levels(self) -> int:
        """Number of growth levels L; resolutions are base * 2**k for k in 0..L."""
        return (self.target_resolution // self.base_resolution).bit_length() - 1

    def resolution_at(self, level: int) -> int:
        return self.base_resolution * 2 ** level

    def channels_at(self, level: int) -> int:
        """Channel width at the level's resolution; halves as resolution grows."""
        return max(self.base_channels // 2 ** level, self.min_channels)

    def to_dict(self) -> dict:
        return {"target_resolution": self.target_resolution,
                "base_resolution": self.base_resolution,
                "bottleneck_dim": self.bottleneck_dim,
                "base_channels": self.base_channels,
                "min_channels": self.min_channels,
                "input_channels": self.input_channels}


@dataclass
class BlendState:
    level: int
    alpha: float

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.level == 0 and self.alpha != 1.0:
            raise ValueError("level 0 has no fade; alpha must be 1")
        if self.level < 0:
            raise ValueError("level must be >= 0")


class PreActResBlock(nn.Module):
    """Pre-activation residual block: x + conv(act(conv(act(x))))."""

    def __init__(self, channels: int):
        super().__init__()
        self.act = nn.LeakyReLU(0.2)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(self.act(x))
        h = self.conv2(self.act(h))
        return x + h


class EncoderBlock(nn.Module):
    """Residual blocks at the incoming resolution, then channel change + 2x downsample."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.res1 = PreActResBlock(in_channels)
        self.res2 = PreActResBlock(in_channels)
        self.proj = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.pool = nn.AvgPool2d(2)

    def forward(self, x):
        return self.pool(self.proj(self.res2(self.res1(x))))


class DecoderBlock(nn.Module):
    """2x nearest upsample + channel change, then residual blocks."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.res1 = PreActResBlock(out_channels)
        self.res2 = PreActResBlock(out_channels)

    def forward(self, x):
        h = self.proj(upsample2(x))
        return self.res2(self.res1(h))


def blend_input(x_full: torch.Tensor, alpha: float) -> torch.Tensor:
    """Fade-in input mix: alpha * x + (1 - alpha) * upsample(down(x))."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return x_full
    low = upsample2(down(x_full))
    if alpha == 0.0:
        return low
    return alpha * x_full + (1.0 - alpha) * low


class Autoencoder(nn.Module):
    """Progressive-growing autoencoder g; reconstruct() preserves input shape.

    No output nonlinearity: the reconstruction is a content tensor, not
    necessarily a valid image.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        self.blend = BlendState(level=0, alpha=1.0)
        L = config.n_levels
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            c0 = config.channels_at(0)
            self.from_image = nn.ModuleList(
                nn.Conv2d(config.input_channels, config.channels_at(k), 1) for k in range(L + 1))
            self.to_image = nn.ModuleList(
                nn.Conv2d(config.channels_at(k), config.input_channels, 1) for k in range(L + 1))
            # enc_blocks[k] maps resolution level k -> k-1 (defined for k >= 1)
            self.enc_blocks = nn.ModuleList(
                EncoderBlock(config.channels_at(k), config.channels_at(k - 1)) for k in range(1, L + 1))
            self.dec_blocks = nn.ModuleList(
                DecoderBlock(config.channels_at(k - 1), config.channels_at(k)) for k in range(1, L + 1))
            self.enc_base = nn.Sequential(PreActResBlock(c0), PreActResBlock(c0))
            self.dec_base = nn.Sequential(PreActResBlock(c0), PreActResBlock(c0))
            flat = c0 * config.base_resolution ** 2
            self.fc_enc = nn.Linear(flat, config.bottleneck_dim)
            self.fc_dec = nn.Linear(config.bottleneck_dim, flat)

    def reconstruct(self, x: torch.Tensor, blend: BlendState | None = None) -> torch.Tensor:
        blend = blend or self.blend
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        level, alpha = blend.level, blend.alpha
        if level > self.config.n_levels:
            raise ValueError(f"level {level} exceeds model's {self.config.n_levels} levels")
        expected = self.config.resolution_at(level)
        if x.shape[-1] != expected or x.shape[-2] != expected:
            raise ValueError(
                f"input resolution {tuple(x.shape[-2:])} does not match level {level} "
                f"resolution {expected}x{expected}")

        fading = level > 0 and alpha < 1.0

        # Encoder
        if fading:
            h_low = self.from_image[level - 1](down(x))
            if alpha == 0.0:
                h = h_low
            else:
                h_high = self.enc_blocks[level - 1](self.from_image[level](x))
                h = alpha * h_high + (1.0 - alpha) * h_low
            top = level - 1
        else:
            h = self.from_image[level](x)
            top = level
        for k in range(top, 0, -1):
            h = self.enc_blocks[k - 1](h)
        h = self.enc_base(h)
        n = h.shape[0]
        z = self.fc_enc(h.reshape(n, -1))

        # Decoder
        c0, r0 = self.config.channels_at(0), self.config.base_resolution
        h = self.fc_dec(z).reshape(n, c0, r0, r0)
        h = self.dec_base(h)
        for k in range(1, top + 1):
            h = self.dec_blocks[k - 1](h)
        if fading:
            y_low = self.to_image[level - 1](h)
            if alpha == 0.0:
                out = upsample2(y_low)
            else:
                y_high = self.to_image[level](self.dec_blocks[level - 1](h))
                out = alpha * y_high + (1.0 - alpha) * upsample2(y_low)
        else:
            out = self.to_image[level](h)
        return out[0] if squeeze else out

    forward = reconstruct

    def active_parameters(self, level: int):
        """Parameters that receive gradients when training at the given level."""
        modules = [self.enc_base, self.dec_base, self.fc_enc, self.fc_dec]
        modules += [self.from_image[k] for k in range(level + 1)]
        modules += [self.to_image[k] for k in range(level + 1)]
        modules += [self.enc_blocks[k] for k in range(level)]
        modules += [self.dec_blocks[k] for k in range(level)]
        params = []
        for m in modules:
            params.extend(m.parameters())
        return params

    def grow(self) -> BlendState:
        """Advance to the next resolution level with alpha reset to 0.

        Parameters are pre-allocated at construction, so growth changes no
        weights.
        """
        if self.blend.level >= self.config.n_levels:
            raise RuntimeError(f"already at target resolution (level {self.blend.level})")
        self.blend = BlendState(level=self.blend.level + 1, alpha=0.0)
        return self.blend

    def set_alpha(self, alpha: float) -> None:
        if self.blend.level == 0:
            if alpha != 1.0:
                raise ValueError("level 0 has no fade")
            return
        self.blend = BlendState(level=self.blend.level, alpha=alpha)


def save_checkpoint(model: Autoencoder, path) -> None:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "blend": {"level": model.blend.level, "alpha": model.blend.alpha},
        "state_dict": model.state_dict(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> Autoencoder:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    model = Autoencoder(ModelConfig(**payload["config"]), seed=payload["seed"])
    model.load_state_dict(payload["state_dict"])
    model.blend = BlendState(**payload["blend"])
    return model
