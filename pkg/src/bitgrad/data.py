"""Dataset ingestion: MNIST-style IDX files and CIFAR-10 binary batches.

Loaders validate headers and declared lengths before allocating tensors.
Dataset roots come from config or the BITGRAD_DATA_DIR environment variable.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .ops import DTYPE

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixels

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    mean: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=DTYPE))
    std: np.ndarray = field(default_factory=lambda: np.ones(1, dtype=DTYPE))
    augment: str = "none"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError("image/label count mismatch")

    @property
    def num_samples(self):
        return self.images.shape[0]


def _read_file(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":  # transparently accept gzipped distributions
        raw = gzip.decompress(raw)
    return raw


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair into a [0,1]-scaled dataset."""
    raw = _read_file(images_path)
    if len(raw) < 16:
        raise FormatError(f"{images_path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack_from(">IIII", raw, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad IDX magic 0x{magic:08x}, "
                          f"expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise FormatError(f"{images_path}: pixel section has {len(raw) - 16} bytes, "
                          f"header declares {count * rows * cols}")

    lraw = _read_file(labels_path)
    if len(lraw) < 8:
        raise FormatError(f"{labels_path}: truncated IDX header")
    lmagic, lcount = struct.unpack_from(">II", lraw, 0)
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad IDX magic 0x{lmagic:08x}, "
                          f"expected 0x{IDX_LABELS_MAGIC:08x}")
    if lcount != count:
        raise FormatError(f"label count {lcount} does not match image count {count}")
    if len(lraw) < 8 + lcount:
        raise FormatError(f"{labels_path}: label section truncated")

    images = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = images.reshape(count, 1, rows, cols).astype(DTYPE) / DTYPE(255.0)
    labels = np.frombuffer(lraw, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise ValueError(f"{labels_path}: label {labels.max()} out of range [0, 10)")
    return Dataset(images=images, labels=labels)


def load_cifar10_bin(paths) -> Dataset:
    """Parse CIFAR-10 binary batch files (3073-byte records, channel-major)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks_x, chunks_y = [], []
    for path in paths:
        raw = _read_file(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
            raise FormatError(f"{path}: length {len(raw)} is not a positive "
                              f"multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = rec[:, 0].astype(np.int64)
        if labels.max() > 9:
            raise ValueError(f"{path}: label {labels.max()} out of range [0, 10)")
        images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(DTYPE) / DTYPE(255.0)
        chunks_x.append(images)
        chunks_y.append(labels)
    return Dataset(images=np.concatenate(chunks_x), labels=np.concatenate(chunks_y))


# ---------------------------------------------------------------------------
# normalization and augmentation
# ---------------------------------------------------------------------------

def normalize_pair(train: Dataset, test: Dataset):
    """Standardize both splits with per-channel constants from the training split."""
    mean = train.images.mean(axis=(0, 2, 3)).astype(DTYPE)
    std = train.images.std(axis=(0, 2, 3)).astype(DTYPE)
    std = np.where(std < 1e-6, DTYPE(1.0), std)
    for ds in (train, test):
        ds.images = (ds.images - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
        ds.mean, ds.std = mean, std
    return train, test


def hflip(images: np.ndarray) -> np.ndarray:
    return images[:, :, :, ::-1]


def pad_crop(images: np.ndarray, oy: int, ox: int, pad: int = 4) -> np.ndarray:
    """Crop the original spatial size at offset (oy, ox) out of a zero-padded image."""
    n, c, h, w = images.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = images
    return padded[:, :, oy:oy + h, ox:ox + w]


def augment(batch: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Seeded training-time augmentation; 'cifar' is pad-4 random crop + hflip."""
    if mode == "none":
        return batch
    if mode != "cifar":
        raise ConfigError(f"unknown augmentation mode {mode!r}")
    n = batch.shape[0]
    out = np.empty_like(batch)
    offs = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        img = pad_crop(batch[i:i + 1], int(offs[i, 0]), int(offs[i, 1]))
        if flips[i]:
            img = hflip(img)
        out[i] = img[0]
    return out


# ---------------------------------------------------------------------------
# roots
# ---------------------------------------------------------------------------

def resolve_data_dir(config_value: str | None = None) -> Path:
    root = config_value or os.environ.get("BITGRAD_DATA_DIR")
    if not root:
        raise ConfigError("no dataset root: set data.dir or BITGRAD_DATA_DIR")
    path = Path(root)
    if not path.is_dir():
        raise ConfigError(f"dataset root {path} does not exist")
    return path


def _find(root: Path, name: str) -> Path:
    for cand in (root / name, root / (name + ".gz")):
        if cand.exists():
            return cand
    raise ConfigError(f"missing dataset file {name}[.gz] under {root}")


def load_mnist(root, augment_train: bool = False):
    root = Path(root)
    tr = load_mnist_idx(_find(root, MNIST_FILES["train"][0]),
                        _find(root, MNIST_FILES["train"][1]))
    te = load_mnist_idx(_find(root, MNIST_FILES["test"][0]),
                        _find(root, MNIST_FILES["test"][1]))
    tr.split, te.split = "train", "test"
    normalize_pair(tr, te)
    tr.augment = "none"  # MNIST trains unaugmented
    return tr, te


def load_cifar10(root, augment_train: bool = True):
    root = Path(root)
    tr = load_cifar10_bin([_find(root, f"data_batch_{i}.bin") for i in range(1, 6)])
    te = load_cifar10_bin([_find(root, "test_batch.bin")])
    tr.split, te.split = "train", "test"
    normalize_pair(tr, te)
    tr.augment = "cifar" if augment_train else "none"
    return tr, te


def load_named(name: str, root) -> tuple[Dataset, Dataset]:
    if name == "mnist":
        return load_mnist(root)
    if name == "cifar10":
        return load_cifar10(root)
    raise ConfigError(f"unknown dataset {name!r}; expected mnist or cifar10")
