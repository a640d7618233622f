"""Datasets: the CIFAR-100 binary format, synthetic blobs, and batching."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from havit.errors import ConfigurationError, FormatError

CIFAR_IMAGE_SHAPE = (3, 32, 32)
CIFAR_PIXELS = 3 * 32 * 32
CIFAR_RECORD_BYTES = 2 + CIFAR_PIXELS
CIFAR100_SPLITS = {"train": 50_000, "test": 10_000}
CIFAR100_CLASSES = 100

_PATCH_RULE = {32: 4, 64: 8}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [M, C, H, W], float64 in [0, 1]
    labels: np.ndarray  # [M], int64
    num_classes: int
    name: str = "dataset"
    coarse_labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ConfigurationError(f"{self.name}: images must be a non-empty [M, C, H, W] array")
        if self.labels.shape != (self.images.shape[0],):
            raise ConfigurationError(f"{self.name}: {self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigurationError(f"{self.name}: labels must lie in [0, {self.num_classes})")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ConfigurationError(f"{self.name}: pixel values must lie in [0, 1]")
        for arr in (self.images, self.labels):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


@dataclass(frozen=True)
class Batch:
    images: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray  # [C]
    std: np.ndarray  # [C]


# -- CIFAR-100 ---------------------------------------------------------------

def _resolve_cifar_file(path, split: str) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / f"{split}.bin"
    if not path.is_file():
        raise FileNotFoundError(f"CIFAR-100 file not found: {path}")
    return path


def parse_cifar100(raw: bytes, expected_records: int | None = None, name: str = "cifar100") -> Dataset:
    """Decode ``coarse | fine | 3072 pixel`` records (fine labels are kept)."""
    if expected_records is not None and len(raw) != expected_records * CIFAR_RECORD_BYTES:
        raise FormatError(
            f"{name}: expected {expected_records * CIFAR_RECORD_BYTES} bytes "
            f"({expected_records} records), got {len(raw)}")
    if not raw or len(raw) % CIFAR_RECORD_BYTES:
        raise FormatError(
            f"{name}: size {len(raw)} bytes is not a positive multiple of the "
            f"{CIFAR_RECORD_BYTES}-byte record")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    images = records[:, 2:].reshape(-1, *CIFAR_IMAGE_SHAPE).astype(np.float64) / 255.0
    return Dataset(images=images, labels=records[:, 1].astype(np.int64),
                   num_classes=CIFAR100_CLASSES, name=name,
                   coarse_labels=records[:, 0].astype(np.int64))


def load_cifar100(path, split: str = "train") -> Dataset:
    """Load ``train.bin`` / ``test.bin`` from the CIFAR-100 binary distribution.

    ``path`` may be the directory holding both files or a single file. Files
    named after a known split must hold exactly that split's record count.
    """
    if split not in CIFAR100_SPLITS:
        raise ConfigurationError(f"unknown CIFAR-100 split {split!r}")
    file = _resolve_cifar_file(path, split)
    expected = CIFAR100_SPLITS.get(file.stem)
    return parse_cifar100(file.read_bytes(), expected, name=f"cifar100-{file.stem}")


def serialize_records(ds: Dataset) -> bytes:
    """Inverse of :func:`parse_cifar100` for any image shape.

    Missing coarse labels are written as 0. Pixels are rounded back to bytes.
    """
    M = len(ds)
    coarse = ds.coarse_labels if ds.coarse_labels is not None else np.zeros(M, dtype=np.int64)
    if ds.labels.max() > 255 or coarse.max() > 255:
        raise FormatError("labels do not fit in one byte")
    pixels = np.rint(ds.images.reshape(M, -1) * 255.0).astype(np.uint8)
    out = np.empty((M, 2 + pixels.shape[1]), dtype=np.uint8)
    out[:, 0] = coarse
    out[:, 1] = ds.labels
    out[:, 2:] = pixels
    return out.tobytes()


# -- synthetic ---------------------------------------------------------------

def synthetic_dataset(num_classes: int, samples_per_class: int, H: int = 32, W: int = 32,
                      seed: int = 0, channels: int = 3, noise: float = 0.1) -> Dataset:
    """Gaussian blobs, one fixed grid cell per class, plus seeded pixel noise.

    Classes are laid out on a ``ceil(sqrt(K))``-wide grid; class ``c``'s blob
    sits at the centre of its cell. Pixels are clamped to [0, 1].
    """
    if min(num_classes, samples_per_class, H, W, channels) < 1:
        raise ConfigurationError("synthetic_dataset: all counts must be >= 1")
    g = math.ceil(math.sqrt(num_classes))
    sigma = min(H, W) / (2.0 * g)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    rng = np.random.default_rng(seed)
    images = np.empty((num_classes * samples_per_class, channels, H, W))
    for c in range(num_classes):
        cy = (c // g + 0.5) * H / g
        cx = (c % g + 0.5) * W / g
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        block = slice(c * samples_per_class, (c + 1) * samples_per_class)
        images[block] = blob + noise * rng.standard_normal((samples_per_class, channels, H, W))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), samples_per_class)
    return Dataset(np.clip(images, 0.0, 1.0), labels, num_classes, name=f"synthetic-{num_classes}c")


def default_patch_size(H: int, W: int) -> int:
    """4 for 32x32 inputs, 8 for 64x64; both give an 8x8 token grid."""
    if H != W or H not in _PATCH_RULE:
        raise ConfigurationError(
            f"no default patch size for {H}x{W} images; set the patch size explicitly")
    return _PATCH_RULE[H]


# -- batching ----------------------------------------------------------------

def compute_stats(ds: Dataset) -> ChannelStats:
    mean = ds.images.mean(axis=(0, 2, 3))
    std = ds.images.std(axis=(0, 2, 3))
    return ChannelStats(mean, np.where(std > 0, std, 1.0))


def normalize(images: np.ndarray, stats: ChannelStats | None) -> np.ndarray:
    if stats is None:
        return images
    return (images - stats.mean[:, None, None]) / stats.std[:, None, None]


def epoch_permutation(M: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(M)


def batches(ds: Dataset, batch_size: int, seed: int = 0, stats: ChannelStats | None = None,
            epoch: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    """Yield ``ceil(M / batch_size)`` normalised batches covering every sample once."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    M = len(ds)
    order = epoch_permutation(M, seed, epoch) if shuffle else np.arange(M)
    for start in range(0, M, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(normalize(ds.images[idx], stats), ds.labels[idx])


def num_batches(ds: Dataset, batch_size: int) -> int:
    return -(-len(ds) // batch_size)


def cifar100_available(path) -> bool:
    return path is not None and all(
        os.path.isfile(os.path.join(path, f"{s}.bin")) for s in CIFAR100_SPLITS)
