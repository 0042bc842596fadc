"""Datasets: seeded synthetic blobs, CIFAR-10 binary batches, and directories of tensor records."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DataConfig
from .errors import ContractError, FormatError
from .tensor import read_tensor, write_tensor

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class ArrayDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield ``(images, labels)``; shuffled when ``rng`` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx], self.labels[idx]

    def astype(self, dtype) -> "ArrayDataset":
        return ArrayDataset(self.images.astype(dtype), self.labels, self.num_classes)


def synthetic_blobs(n: int, num_classes: int = 2, image_size: int = 8, channels: int = 3, noise: float = 0.3, seed: int = 0):
    """Each class places a Gaussian blob at its own spot on a ring, with jitter and a class colour.

    Returns float images in ``n x channels x image_size x image_size`` and labels.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    centre = (image_size - 1) / 2.0
    radius = image_size / 4.0
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    colours = np.random.default_rng(seed + 7919).uniform(0.5, 1.0, size=(num_classes, channels))
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    images = np.empty((n, channels, image_size, image_size))
    for i, k in enumerate(labels):
        cy = centre + radius * np.sin(angles[k]) + rng.uniform(-1, 1)
        cx = centre + radius * np.cos(angles[k]) + rng.uniform(-1, 1)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 1.5**2))
        images[i] = colours[k][:, None, None] * blob + noise * rng.standard_normal((channels, image_size, image_size))
    return images, labels


def read_cifar10_file(path) -> tuple:
    """Decode one CIFAR-10 binary batch into ``N x 3 x 32 x 32`` floats in [0, 1] and labels."""
    raw = Path(path).read_bytes()
    whole = len(raw) // CIFAR_RECORD
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: truncated record", whole * CIFAR_RECORD)
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(whole, CIFAR_RECORD)
    labels = buf[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: label byte {labels[bad[0]]} out of range", int(bad[0]) * CIFAR_RECORD)
    images = buf[:, 1:].reshape(whole, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def write_cifar10_file(path, images_u8: np.ndarray, labels) -> None:
    """Inverse of :func:`read_cifar10_file` for ``uint8`` images (used to build fixtures)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), CIFAR_PIXELS)
    rows = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    Path(path).write_bytes(rows.tobytes())


def load_cifar10(root, train_files=None):
    root = Path(root)
    files = train_files or [f for f in CIFAR_TRAIN_FILES if (root / f).exists()]
    if not files:
        raise FormatError(f"no CIFAR-10 batch files under {root}")
    parts = [read_cifar10_file(root / f) for f in files]
    train = ArrayDataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), 10)
    test_path = root / CIFAR_TEST_FILE
    test = ArrayDataset(*read_cifar10_file(test_path), 10) if test_path.exists() else None
    return train, test


def save_tensor_dir(root, split: str, images: np.ndarray, labels) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / f"{split}_images.bin", "wb") as f:
        write_tensor(f, np.asarray(images, dtype=np.float64))
    with open(root / f"{split}_labels.bin", "wb") as f:
        write_tensor(f, np.asarray(labels, dtype=np.int64))


def load_tensor_dir(root, split: str, num_classes: int) -> ArrayDataset | None:
    root = Path(root)
    img_path, lab_path = root / f"{split}_images.bin", root / f"{split}_labels.bin"
    if not img_path.exists():
        return None
    with open(img_path, "rb") as f:
        images = read_tensor(f)
    with open(lab_path, "rb") as f:
        labels = read_tensor(f)
    return ArrayDataset(images.astype(np.float64), labels, num_classes)


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    return (images - mean) / std


def load_datasets(cfg: DataConfig) -> tuple:
    """Train and eval :class:`ArrayDataset` for a data config (eval may reuse train if absent)."""
    if cfg.source == "synthetic-blobs":
        tr = synthetic_blobs(cfg.train_size, cfg.num_classes, cfg.image_size, cfg.channels, cfg.noise, cfg.seed)
        ev = synthetic_blobs(cfg.eval_size, cfg.num_classes, cfg.image_size, cfg.channels, cfg.noise, cfg.seed + 1)
        train, evals = ArrayDataset(*tr, cfg.num_classes), ArrayDataset(*ev, cfg.num_classes)
    elif cfg.source == "cifar10-binary":
        train, evals = load_cifar10(cfg.path)
        if cfg.train_size and cfg.train_size < len(train):
            train = ArrayDataset(train.images[: cfg.train_size], train.labels[: cfg.train_size], 10)
        if evals is not None and cfg.eval_size and cfg.eval_size < len(evals):
            evals = ArrayDataset(evals.images[: cfg.eval_size], evals.labels[: cfg.eval_size], 10)
    else:
        train = load_tensor_dir(cfg.path, "train", cfg.num_classes)
        if train is None:
            raise FormatError(f"{cfg.path}: missing train_images.bin")
        evals = load_tensor_dir(cfg.path, "eval", cfg.num_classes)
    if evals is None:
        evals = train
    train = ArrayDataset(normalize(train.images, cfg.mean, cfg.std), train.labels, train.num_classes)
    evals = ArrayDataset(normalize(evals.images, cfg.mean, cfg.std), evals.labels, evals.num_classes)
    return train, evals
