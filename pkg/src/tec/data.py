"""Synthetic image corpus and the raw on-disk image format.

Images are class-conditioned oriented gratings with a localized
high-contrast foreground patch plus noise, clamped to [0, 1]. The
foreground gives the class token something non-trivial to attend to;
the latent class id is kept for diagnostics only.

The on-disk format is a bespoke planar binary (magic ``TECIMG1``,
u32 channels/height/width, float32 little-endian pixels) so round trips
are bitwise exact without any codec dependency.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestionError, ParameterError
from .masking import derived_seed

IMG_MAGIC = b"TECIMG1"
FILE_SUFFIX = ".teci"


@dataclass(frozen=True)
class CorpusConfig:
    n_images: int
    image_size: int = 32
    channels: int = 3
    n_classes: int = 8
    seed: int = 0


@dataclass(frozen=True)
class ImageRecord:
    id: str
    pixels: np.ndarray  # channels x H x W, float64 in [0, 1]
    label: int


def _grating(size: int, theta: float, freq: float, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    wave = np.cos(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))
                  + phase)
    return 0.5 + 0.5 * wave


def synthesize_image(cfg: CorpusConfig, index: int) -> ImageRecord:
    rng = np.random.default_rng(derived_seed(cfg.seed, index))
    label = int(rng.integers(cfg.n_classes))
    size = cfg.image_size

    theta = np.pi * label / cfg.n_classes + rng.normal(0.0, 0.06)
    freq = 2.0 + (label % 4) + rng.normal(0.0, 0.15)
    base = _grating(size, theta, freq, rng.uniform(0, 2 * np.pi))
    amplitude = rng.uniform(0.25, 0.45)
    img = np.empty((cfg.channels, size, size))
    for c in range(cfg.channels):
        tint = 0.35 + 0.3 * ((label + c) % cfg.n_classes) / cfg.n_classes
        img[c] = tint + amplitude * (base - 0.5)

    # localized foreground: a bright blob with a dark rim, random position
    side = max(4, size // 4)
    cy = rng.integers(side // 2, size - side // 2)
    cx = rng.integers(side // 2, size - side // 2)
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / (side / 2) ** 2
    blob = np.exp(-2.0 * d2)
    rim = np.exp(-2.0 * (np.sqrt(d2) - 1.2) ** 2)
    fg_color = rng.uniform(0.7, 1.0, size=cfg.channels)
    for c in range(cfg.channels):
        img[c] = img[c] * (1 - blob) + fg_color[c] * blob - 0.35 * rim

    img += rng.normal(0.0, 0.03, size=img.shape)
    return ImageRecord(id=f"{index:06d}", pixels=np.clip(img, 0.0, 1.0),
                       label=label)


def gen_synthetic(cfg: CorpusConfig) -> list[ImageRecord]:
    """Deterministic corpus; each image depends only on (seed, index)."""
    return [synthesize_image(cfg, i) for i in range(cfg.n_images)]


def noise_image(cfg: CorpusConfig, index: int) -> np.ndarray:
    """A structure-free counterpart for diagnostics."""
    rng = np.random.default_rng(derived_seed(cfg.seed, index, 0xFF))
    return rng.uniform(0.0, 1.0, size=(cfg.channels, cfg.image_size, cfg.image_size))


# -- TECIMG1 files ------------------------------------------------------------

def write_teci(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3:
        raise ParameterError("expected a channels x H x W pixel array")
    c, h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC)
        fh.write(struct.pack("<III", c, h, w))
        fh.write(np.ascontiguousarray(pixels, dtype="<f4").tobytes())


def read_teci(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    header = len(IMG_MAGIC) + 12
    if len(raw) < header or raw[:len(IMG_MAGIC)] != IMG_MAGIC:
        raise IngestionError(f"{path} is not a TECIMG1 file (bad magic)")
    c, h, w = struct.unpack("<III", raw[len(IMG_MAGIC):header])
    expected = header + 4 * c * h * w
    if len(raw) != expected:
        raise IngestionError(
            f"{path} is truncated: {len(raw)} bytes, expected {expected}")
    pixels = np.frombuffer(raw[header:], dtype="<f4").astype(np.float64)
    return pixels.reshape(c, h, w)


def save_corpus(directory, corpus: list[ImageRecord]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in corpus:
        write_teci(directory / f"{rec.id}{FILE_SUFFIX}", rec.pixels)


def load_dir(path) -> list[ImageRecord]:
    """Load every ``.teci`` file in a directory, sorted by filename."""
    path = Path(path)
    files = sorted(path.glob(f"*{FILE_SUFFIX}"))
    if not files:
        raise IngestionError(f"no {FILE_SUFFIX} files in {path}")
    return [ImageRecord(id=f.stem, pixels=read_teci(f), label=-1) for f in files]


# -- batching and augmentation --------------------------------------------------

def epoch_batches(n_items: int, batch_size: int, seed: int, epoch: int):
    """Seeded shuffle, then contiguous batches; every index appears once."""
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    order = np.random.default_rng(derived_seed(seed, epoch)).permutation(n_items)
    for lo in range(0, n_items, batch_size):
        yield order[lo:lo + batch_size]


def random_resized_crop(pixels: np.ndarray, rng: np.random.Generator,
                        scale=(0.6, 1.0)) -> np.ndarray:
    """Crop a random area fraction, then bilinearly resize back."""
    c, h, w = pixels.shape
    area = rng.uniform(scale[0], scale[1]) * h * w
    aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
    ch = int(round(np.sqrt(area / aspect)))
    cw = int(round(np.sqrt(area * aspect)))
    ch, cw = min(max(ch, 2), h), min(max(cw, 2), w)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = pixels[:, top:top + ch, left:left + cw]

    ys = (np.arange(h) + 0.5) * ch / h - 0.5
    xs = (np.arange(w) + 0.5) * cw / w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, ch - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, cw - 1)
    y1 = np.minimum(y0 + 1, ch - 1)
    x1 = np.minimum(x0 + 1, cw - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top_row = crop[:, y0][:, :, x0] * (1 - wx) + crop[:, y0][:, :, x1] * wx
    bot_row = crop[:, y1][:, :, x0] * (1 - wx) + crop[:, y1][:, :, x1] * wx
    return top_row * (1 - wy) + bot_row * wy
