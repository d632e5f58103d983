"""Datasets: the 3073-byte-record image format and a synthetic stand-in.

Records are one label byte followed by a 32x32 (or generally HxW) planar
RGB image, red plane first — the classic binary CIFAR-10 layout.  Synthetic
datasets are generated directly in that uint8 domain so they export to the
identical byte format and share the loader's normalization path.

Images are stored raw (uint8); batches are scaled to [0,1] and per-channel
standardised on the fly with statistics computed from the training split.
Augmentation (pad-4 random crop + horizontal flip) is applied lazily per
epoch from a generator derived from (seed, epoch), so any epoch can be
replayed bit-for-bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError
from .random import derive_rng

__all__ = [
    "Dataset",
    "load_cifar10",
    "synthetic_dataset",
    "synthetic_pair",
    "serialize_records",
    "parse_records",
    "augment_batch",
]

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    """Raw uint8 images (N, C, H, W), integer labels, and channel statistics."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    mean: np.ndarray  # per-channel, in [0,1] units
    std: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DataError(f"images must be uint8 (N,C,H,W), got {self.images.dtype} {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError("labels length does not match image count")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        """uint8 images -> float64, scaled to [0,1] and standardised."""
        x = raw.astype(np.float64) / 255.0
        return (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]

    def batch(self, indices: np.ndarray, augment_rng: Optional[np.random.Generator] = None):
        raw = self.images[indices]
        if augment_rng is not None:
            raw = augment_batch(raw, augment_rng)
        return self.normalize(raw), self.labels[indices]


def _channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    return mean, std


def parse_records(blob: bytes, path: str, shape: tuple[int, int, int] = (3, 32, 32)):
    """Decode label+planar-pixel records; errors name the file and offset."""
    c, h, w = shape
    rec = 1 + c * h * w
    if len(blob) == 0 or len(blob) % rec != 0:
        offset = (len(blob) // rec) * rec
        raise DataError(
            f"{path}: truncated or malformed record file "
            f"(size {len(blob)} is not a multiple of {rec}; bad record at offset {offset})"
        )
    arr = np.frombuffer(blob, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0].astype(np.int64)
    images = arr[:, 1:].reshape(-1, c, h, w)
    return images, labels


def serialize_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_records` (bitwise round-trip)."""
    n, c, h, w = images.shape
    out = np.empty((n, 1 + c * h * w), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = images.reshape(n, -1)
    return out.tobytes()


def load_cifar10(directory: str) -> tuple[Dataset, Dataset]:
    """Load the binary-format train batches and test batch from a directory."""
    train_images, train_labels = [], []
    for name in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise DataError(f"{path}: dataset file not found")
        with open(path, "rb") as fh:
            blob = fh.read()
        images, labels = parse_records(blob, path)
        if labels.max() > 9:
            bad = int(np.argmax(labels > 9))
            raise DataError(f"{path}: label out of range at record {bad}")
        if name == CIFAR_TEST_FILE:
            test_images, test_labels = images, labels
        else:
            train_images.append(images)
            train_labels.append(labels)
    images = np.concatenate(train_images)
    labels = np.concatenate(train_labels)
    mean, std = _channel_stats(images)
    train = Dataset(images, labels, "train", mean, std)
    test = Dataset(test_images, test_labels, "test", mean, std)
    return train, test


def _balanced_labels(classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Class counts as even as possible, order shuffled; size == classes
    therefore yields a permutation of 0..classes-1."""
    base = np.arange(size) % classes
    return rng.permutation(base).astype(np.int64)


def _smooth(field: np.ndarray) -> np.ndarray:
    """Cheap 3x3 box blur (wrap-free) to give class templates spatial structure."""
    out = field.copy()
    for axis in (1, 2):
        out = out + np.roll(out, 1, axis=axis) + np.roll(out, -1, axis=axis)
    return out / 9.0


def synthetic_dataset(
    classes: int,
    size: int,
    shape: tuple[int, int, int] = (3, 16, 16),
    seed: int = 0,
    separability: float = 0.9,
    split: str = "train",
    stats_from: Optional[Dataset] = None,
) -> Dataset:
    """Class-conditional blob images in the uint8 record domain.

    Each class owns a fixed smooth template (keyed by seed only, so train and
    test splits share geometry); samples are template + pixel noise, with
    ``separability`` in (0, 1] trading signal amplitude against noise.
    """
    if not 0 < separability <= 1:
        raise DataError(f"separability must lie in (0, 1], got {separability}")
    c, h, w = shape
    trng = derive_rng(seed, "synthetic-templates")
    templates = _smooth(trng.normal(size=(classes, c, h, w)).reshape(classes * c, h, w)).reshape(
        classes, c, h, w
    )
    templates /= np.abs(templates).max(axis=(1, 2, 3), keepdims=True)

    rng = derive_rng(seed, f"synthetic-{split}")
    labels = _balanced_labels(classes, size, rng)
    signal = 0.42 * separability
    noise = 0.22 * (1.1 - separability)
    x = 0.5 + signal * templates[labels] + noise * rng.normal(size=(size, c, h, w))
    images = np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
    if stats_from is not None:
        mean, std = stats_from.mean, stats_from.std
    else:
        mean, std = _channel_stats(images)
    return Dataset(images, labels, split, mean, std)


def synthetic_pair(
    classes: int,
    train_size: int,
    test_size: int,
    shape: tuple[int, int, int] = (3, 16, 16),
    seed: int = 0,
    separability: float = 0.9,
) -> tuple[Dataset, Dataset]:
    """Train/test splits sharing templates and train-split normalization."""
    train = synthetic_dataset(classes, train_size, shape, seed, separability, "train")
    test = synthetic_dataset(classes, test_size, shape, seed, separability, "test", stats_from=train)
    return train, test


def augment_batch(raw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pad-4 random crop plus per-image horizontal flip, on raw uint8 images."""
    n, c, h, w = raw.shape
    pad = 4
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=raw.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = raw
    out = np.empty_like(raw)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offsets[i]
        img = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out
