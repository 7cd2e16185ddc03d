"""Manifest-driven dataset ingestion, preprocessing, and a synthetic benchmark generator.

The manifest is a CSV with header ``path,label,split,anomaly_type``. Train
rows must be normal (novelty-detection premise) and anomalous rows must
carry an anomaly type. Paths are resolved relative to the manifest's
directory.

The synthetic generator writes band-limited noise textures: normal images
share a fixed spectral profile; anomalous images either carry a local patch
with a shifted spectral peak ("patch-shift") or a global shift
("global-shift"). A subtlety of 0 makes anomalies indistinguishable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

LABELS = ("normal", "anomalous")
SPLITS = ("train", "val-pool", "test")
MANIFEST_HEADER = ["path", "label", "split", "anomaly_type"]

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ManifestError(ValueError):
    """Schema or invariant violation in a manifest file."""


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: str
    split: str
    anomaly_type: str

    @property
    def is_anomalous(self) -> bool:
        return self.label == "anomalous"


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path

    def split(self, name: str) -> list[ManifestRow]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.rows if r.split == name]

    def resolve(self, row: ManifestRow) -> Path:
        return self.root / row.path


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(
                f"bad manifest header {header}, expected {MANIFEST_HEADER}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 4:
                raise ManifestError(f"row {lineno}: expected 4 columns, got {len(rec)}")
            p, label, split, atype = (c.strip() for c in rec)
            if label not in LABELS:
                raise ManifestError(f"row {lineno}: unknown label {label!r}")
            if split not in SPLITS:
                raise ManifestError(f"row {lineno}: unknown split {split!r}")
            if split == "train" and label == "anomalous":
                raise ManifestError(f"row {lineno}: anomalous sample in train split")
            if label == "anomalous" and not atype:
                raise ManifestError(f"row {lineno}: anomalous row with empty anomaly_type")
            rows.append(ManifestRow(path=p, label=label, split=split, anomaly_type=atype))
    return Manifest(rows=rows, root=path.parent)


@dataclass(frozen=True)
class PreprocessSpec:
    target_resolution: int = 32
    grayscale: bool = False
    center_crop: bool = False
    hist_equalize: bool = False

    def __post_init__(self):
        r = self.target_resolution
        if r < 8 or r & (r - 1):
            raise ValueError(f"target_resolution must be a power of two >= 8, got {r}")

    def key(self) -> str:
        parts = [str(self.target_resolution)]
        parts += [name for name, on in (("gray", self.grayscale), ("crop", self.center_crop),
                                        ("eq", self.hist_equalize)) if on]
        return "-".join(parts)


def _equalize_channelwise(arr: np.ndarray) -> np.ndarray:
    """256-bin histogram equalization on the luminance, applied via a value map.

    A constant image maps to itself.
    """
    if arr.ndim == 2:
        luma = arr
    else:
        luma = arr @ LUMA_WEIGHTS
    vals = np.clip(luma, 0, 255).astype(np.uint8)
    if vals.min() == vals.max():
        return arr
    hist = np.bincount(vals.ravel(), minlength=256)
    cdf = hist.cumsum()
    cdf_min = cdf[vals.min()]
    lut = (cdf - cdf_min) / (cdf[-1] - cdf_min) * 255.0
    mapped = lut[vals]
    if arr.ndim == 2:
        return mapped
    # Rescale all channels by the luminance gain so color ratios are kept.
    gain = np.divide(mapped, luma, out=np.ones_like(mapped), where=luma > 0)
    return np.clip(arr * gain[..., None], 0, 255)


def preprocess(image: Image.Image | np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Produce a (C, R, R) float32 array in [0, 1].

    Steps apply in order: center crop (3/4 of each side), bilinear resize,
    grayscale (luminance), histogram equalization, scale to [0, 1].
    """
    if isinstance(image, np.ndarray):
        if image.dtype != np.uint8:
            image = np.clip(image, 0, 255).astype(np.uint8)
        image = Image.fromarray(image)
    if image.mode not in ("L", "RGB"):
        image = image.convert("RGB")
    if spec.center_crop:
        w, h = image.size
        cw, ch = (3 * w) // 4, (3 * h) // 4
        left, top = (w - cw) // 2, (h - ch) // 2
        image = image.crop((left, top, left + cw, top + ch))
    r = spec.target_resolution
    if image.size != (r, r):
        image = image.resize((r, r), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float64)
    if spec.grayscale and arr.ndim == 3:
        arr = arr @ LUMA_WEIGHTS
    if spec.hist_equalize:
        arr = _equalize_channelwise(arr)
    arr = (arr / 255.0).astype(np.float32)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def load_split(manifest: Manifest, split: str, spec: PreprocessSpec
               ) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Load and preprocess a split; returns (images, labels, sample ids)."""
    rows = manifest.split(split)
    if not rows:
        raise ManifestError(f"split {split!r} is empty")
    images, labels, ids = [], [], []
    for row in rows:
        p = manifest.resolve(row)
        try:
            with Image.open(p) as im:
                images.append(preprocess(im, spec))
        except (OSError, SyntaxError) as e:
            raise ManifestError(f"cannot decode image {p}: {e}") from e
        labels.append(1 if row.is_anomalous else 0)
        ids.append(row.path)
    return np.stack(images), np.array(labels, dtype=np.int64), ids


# --- synthetic benchmark -------------------------------------------------

@dataclass
class SyntheticSpec:
    seed: int = 0
    n_normal_train: int = 2000
    n_normal_test: int = 200
    n_anomalous_test: int = 200
    n_anomalous_pool: int = 120
    resolution: int = 32
    peak_frequency: float = 0.15    # cycles/pixel of the normal texture band
    bandwidth: float = 0.04
    subtlety: float = 1.0           # 0 => anomalies identical to normal
    peak_shift: float = 0.9         # relative shift of the anomalous band at subtlety 1
    patch_fraction: float = 0.5     # side of the planted patch relative to the image
    noise_floor: float = 0.02       # per-image white sensor noise level, lower bound
    noise_ceiling: float = 0.09     # upper bound; the spread defeats pixel-space scores

    def __post_init__(self):
        r = self.resolution
        if r < 16 or r & (r - 1):
            raise ValueError(f"resolution must be a power of two >= 16, got {r}")


TEXTURE_STD = 0.11


def _bandpass(noise: np.ndarray, peak: float, bandwidth: float) -> np.ndarray:
    """Filter a white-noise field through an energy-normalized Gaussian annulus.

    The normalization makes the output variance independent of the peak
    frequency: textures differ in spectral content only, not in amplitude.
    """
    resolution = noise.shape[0]
    f = np.fft.fftfreq(resolution)
    radius = np.hypot(*np.meshgrid(f, f, indexing="ij"))
    filt = np.exp(-0.5 * ((radius - peak) / bandwidth) ** 2)
    filt /= np.sqrt(np.mean(filt ** 2))
    return np.real(np.fft.ifft2(np.fft.fft2(noise) * filt))


def _render(rng: np.random.Generator, spec: SyntheticSpec, kind: str) -> np.ndarray:
    normal_peak = spec.peak_frequency
    shifted_peak = normal_peak * (1.0 + spec.subtlety * spec.peak_shift)
    noise = rng.standard_normal((spec.resolution, spec.resolution))
    if kind == "normal":
        tex = _bandpass(noise, normal_peak, spec.bandwidth)
    elif kind == "global-shift":
        tex = _bandpass(noise, shifted_peak, spec.bandwidth)
    elif kind == "patch-shift":
        # Both filters share the same phase field, so at subtlety 0 the
        # patch splice is seamless (bitwise identical to the normal texture).
        tex = _bandpass(noise, normal_peak, spec.bandwidth)
        alt = _bandpass(noise, shifted_peak, spec.bandwidth)
        side = max(2, int(round(spec.resolution * spec.patch_fraction)))
        top = rng.integers(0, spec.resolution - side + 1)
        left = rng.integers(0, spec.resolution - side + 1)
        tex[top:top + side, left:left + side] = alt[top:top + side, left:left + side]
    else:
        raise ValueError(f"unknown kind {kind!r}")
    level = rng.uniform(spec.noise_floor, spec.noise_ceiling)
    img = 0.5 + TEXTURE_STD * tex + level * rng.standard_normal(noise.shape)
    return np.clip(img, 0.0, 1.0)


def generate_arrays(spec: SyntheticSpec) -> dict:
    """In-memory variant of :func:`generate_synthetic`.

    Returns a dict with float32 arrays of shape (N, 1, R, R): ``train``
    (normals), ``test_images`` with ``test_labels``, and ``pool_images``
    with ``pool_types``. Pixel values are quantized to 8 bits so the
    arrays match the PNG pipeline bit for bit.
    """
    rng = np.random.default_rng(spec.seed)

    def make(kind: str) -> np.ndarray:
        img = _render(rng, spec, kind)
        return (np.round(img * 255.0) / 255.0).astype(np.float32)[None]

    train = np.stack([make("normal") for _ in range(spec.n_normal_train)])
    test_n = [make("normal") for _ in range(spec.n_normal_test)]
    test_a, pool, pool_types = [], [], []
    for i in range(spec.n_anomalous_test):
        test_a.append(make("patch-shift" if i % 2 == 0 else "global-shift"))
    for i in range(spec.n_anomalous_pool):
        kind = "patch-shift" if i % 2 == 0 else "global-shift"
        pool.append(make(kind))
        pool_types.append(kind)
    return {
        "train": train,
        "test_images": np.stack(test_n + test_a),
        "test_labels": np.array([0] * len(test_n) + [1] * len(test_a), dtype=np.int64),
        "pool_images": np.stack(pool),
        "pool_types": pool_types,
    }


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write the synthetic dataset (PNGs + manifest.csv); returns the manifest path.

    Splits: train (normal only), test (normal + anomalous of both types),
    val-pool (anomalous of both types, for weakly-supervised selection).
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    rows = []

    def emit(name: str, kind: str, label: str, split: str, atype: str):
        img = _render(rng, spec, kind)
        arr = np.round(img * 255.0).astype(np.uint8)
        rel = f"images/{name}.png"
        Image.fromarray(arr, mode="L").save(out_dir / rel)
        rows.append((rel, label, split, atype))

    for i in range(spec.n_normal_train):
        emit(f"train_normal_{i:05d}", "normal", "normal", "train", "")
    for i in range(spec.n_normal_test):
        emit(f"test_normal_{i:05d}", "normal", "normal", "test", "")
    for i in range(spec.n_anomalous_test):
        kind = "patch-shift" if i % 2 == 0 else "global-shift"
        emit(f"test_anom_{i:05d}", kind, "anomalous", "test", kind)
    for i in range(spec.n_anomalous_pool):
        kind = "patch-shift" if i % 2 == 0 else "global-shift"
        emit(f"pool_anom_{i:05d}", kind, "anomalous", "val-pool", kind)

    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    return manifest_path
