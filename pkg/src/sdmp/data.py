"""Datasets: CIFAR-10 binary batches and a synthetic class-template set."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mixing import resize_bilinear

RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, H, W] in [0, 1]
    labels: np.ndarray  # [n] int64

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


def load_cifar10_file(path, expected_records: int | None = None, dtype=np.float32) -> Dataset:
    """Parse one CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CIFAR-10 file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        complete = raw.size // RECORD_BYTES
        raise DatasetError(
            f"{path}: length {raw.size} is not a multiple of {RECORD_BYTES}; "
            f"truncated record at byte offset {complete * RECORD_BYTES}"
        )
    records = raw.reshape(-1, RECORD_BYTES)
    if expected_records is not None and len(records) != expected_records:
        raise DatasetError(f"{path}: expected {expected_records} records, found {len(records)}")
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetError(f"{path}: label {labels[bad]} out of range at byte offset {bad * RECORD_BYTES}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(dtype) / dtype(255)
    return Dataset(images, labels)


def load_cifar10(path, split: str = "train", dtype=np.float32) -> Dataset:
    """Load a CIFAR-10 binary file, or the train/test split of a directory of batches."""
    path = Path(path)
    if path.is_file():
        return load_cifar10_file(path, dtype=dtype)
    if not path.is_dir():
        raise FileNotFoundError(f"CIFAR-10 path not found: {path}")
    names = CIFAR_TRAIN_FILES if split == "train" else [CIFAR_TEST_FILE]
    parts = [load_cifar10_file(path / name, CIFAR_RECORDS_PER_FILE, dtype) for name in names]
    return Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


def write_cifar10_file(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write images in [0, 1] as a CIFAR-10 binary batch (used for fixtures and export)."""
    px = np.clip(np.rint(np.asarray(images) * 255), 0, 255).astype(np.uint8).reshape(len(labels), -1)
    if px.shape[1] != RECORD_BYTES - 1:
        raise DatasetError(f"expected 3x32x32 images, got {images.shape}")
    recs = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], px], axis=1)
    recs.tofile(os.fspath(path))


def normalize(images: np.ndarray, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=images.dtype).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=images.dtype).reshape(1, -1, 1, 1)
    return (images - mean) / std


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 10
    samples_per_class: int = 500
    test_per_class: int = 100
    image_size: int = 32
    channels: int = 3
    noise_sigma: float = 0.1
    # side of the random grid each template is upsampled from
    template_grid: int = 4


def generate_synthetic(spec: SyntheticSpec, seed: int = 0, dtype=np.float32) -> tuple[Dataset, Dataset]:
    """Per class a smooth random template; samples add clipped Gaussian pixel noise.

    Templates, train noise and test noise come from independent child seeds.
    """
    if spec.n_classes < 2:
        raise DatasetError(f"need at least 2 classes, got {spec.n_classes}")
    if spec.noise_sigma < 0:
        raise DatasetError(f"noise_sigma must be non-negative, got {spec.noise_sigma}")
    tmpl_seed, train_seed, test_seed = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(tmpl_seed)
    g = spec.template_grid
    coarse = rng.uniform(0, 1, size=(spec.n_classes, spec.channels, g, g))
    templates = resize_bilinear(coarse, spec.image_size, spec.image_size)

    def draw(child, per_class):
        r = np.random.default_rng(child)
        labels = np.repeat(np.arange(spec.n_classes), per_class)
        imgs = templates[labels]
        if spec.noise_sigma > 0:
            imgs = imgs + r.normal(0, spec.noise_sigma, size=imgs.shape)
        imgs = np.clip(imgs, 0, 1).astype(dtype)
        order = r.permutation(len(labels))
        return Dataset(imgs[order], labels[order])

    return draw(train_seed, spec.samples_per_class), draw(test_seed, spec.test_per_class)


def stratified_subset(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of a class-balanced subsample with ``round(fraction * count)`` per class."""
    if not 0 < fraction <= 1:
        raise DatasetError(f"fraction must lie in (0, 1], got {fraction}")
    idx = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        k = int(round(fraction * len(members)))
        if k < 1:
            raise DatasetError(f"fraction {fraction} leaves no sample of class {c} ({len(members)} available)")
        idx.append(rng.choice(members, size=k, replace=False))
    return np.sort(np.concatenate(idx))
