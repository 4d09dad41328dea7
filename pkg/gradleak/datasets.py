"""
Dataset containers and loaders.

Two sources are supported:
1. CIFAR-10 binary batches (the validation file `test_batch.bin`), order preserved
   so that "the first k images" is well defined.
2. A seeded synthetic set of smooth, class-dependent images for desk-scale runs.
"""

import os
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from gradleak.errors import ConfigError, DatasetFormatError, EmptyDatasetError

CIFAR10_RECORD_BYTES = 3073
CIFAR10_SHAPE = (3, 32, 32)
CIFAR10_CLASSES = 10
CIFAR10_VALIDATION_FILE = "test_batch.bin"


@dataclass(frozen=True)
class Sample:
    """One (image, label) pair; image is (C, H, W) in [0, 1]."""
    image: np.ndarray
    label: int


@dataclass
class Dataset:
    """Images (N, C, H, W) in [0, 1] with integer labels in 0..num_classes-1."""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int = CIFAR10_CLASSES

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.size:
            raise ConfigError(f"{self.images.shape[0]} images but {self.labels.size} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ConfigError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in 0..{self.num_classes - 1}")

    def __len__(self) -> int:
        return int(self.labels.size)

    def __getitem__(self, index: int) -> Sample:
        return Sample(self.images[index], int(self.labels[index]))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], num_classes: int) -> "Dataset":
        if not samples:
            raise EmptyDatasetError("cannot build a dataset from zero samples")
        images = np.stack([s.image for s in samples])
        labels = np.array([s.label for s in samples])
        return cls(images, labels, num_classes)


def load_cifar10(path: str, limit: Optional[int] = None) -> Dataset:
    """
    Load a CIFAR-10 binary batch.

    Args:
        path: a batch file, or a directory containing `test_batch.bin`.
        limit: keep only the first `limit` records.

    Raises:
        DatasetFormatError: truncated record or label byte > 9.
    """
    if os.path.isdir(path):
        path = os.path.join(path, CIFAR10_VALIDATION_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"CIFAR-10 batch not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR10_RECORD_BYTES != 0:
        raise DatasetFormatError(
            f"{path}: {raw.size} bytes is not a whole number of {CIFAR10_RECORD_BYTES}-byte records"
        )
    records = raw.reshape(-1, CIFAR10_RECORD_BYTES)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= CIFAR10_CLASSES:
        bad = int(np.argmax(labels >= CIFAR10_CLASSES))
        raise DatasetFormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = records[:, 1:].reshape((-1,) + CIFAR10_SHAPE).astype(np.float64) / 255.0
    return Dataset(images, labels, CIFAR10_CLASSES)


def _class_palette(label: int, num_classes: int, channels: int) -> np.ndarray:
    phase = label / num_classes
    return 0.5 + 0.4 * np.cos(2.0 * np.pi * (phase + np.arange(channels) / 3.0))


def _synthetic_image(rng: np.random.Generator, label: int, num_classes: int,
                     shape: Tuple[int, int, int]) -> np.ndarray:
    channels, height, width = shape
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij")

    # class-dependent oriented stripes
    angle = np.pi * label / num_classes
    stripes = 0.5 + 0.5 * np.cos(2.0 * np.pi * 1.5 * (xx * np.cos(angle) + yy * np.sin(angle))
                                 + rng.uniform(0.0, 2.0 * np.pi))
    image = 0.4 * stripes[None] * _class_palette(label, num_classes, channels)[:, None, None]

    # random smooth blobs
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.0, 1.0, size=2)
        sigma = rng.uniform(0.1, 0.3)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
        image = image + 0.6 * rng.uniform(-1.0, 1.0, size=channels)[:, None, None] * bump[None]

    lo, hi = image.min(), image.max()
    return (image - lo) / (hi - lo) if hi > lo else np.full(shape, 0.5)


def make_synthetic(seed: int, count: int, shape: Tuple[int, int, int] = (3, 16, 16),
                   num_classes: int = 10, distinct_labels: bool = False) -> Dataset:
    """
    Deterministic desk-scale stand-in for CIFAR.

    Images are smooth (stripes plus Gaussian blobs) rather than white noise so that
    total variation is an informative prior.

    Raises:
        ConfigError: if distinct_labels is set and count > num_classes.
    """
    if count < 0:
        raise ConfigError("count must be non-negative")
    if distinct_labels and count > num_classes:
        raise ConfigError(f"cannot draw {count} distinct labels from {num_classes} classes")
    rng = np.random.default_rng(seed)
    if distinct_labels:
        labels = rng.permutation(num_classes)[:count]
    else:
        labels = rng.integers(0, num_classes, size=count)
    images: List[np.ndarray] = [_synthetic_image(rng, int(y), num_classes, tuple(shape)) for y in labels]
    if not images:
        return Dataset(np.zeros((0,) + tuple(shape)), labels, num_classes)
    return Dataset(np.stack(images), labels, num_classes)
