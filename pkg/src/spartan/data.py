"""MNIST IDX ingestion, per-pixel statistics, batching, synthetic fixtures.

IDX files carry big-endian 32-bit headers (magic, then one count per
dimension) followed by unsigned bytes.  Images normalize to [0, 1] by /255,
which also fixes the attack clip box.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layers import PixelRange
from .tensor import Rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """Malformed IDX container."""


@dataclass
class Dataset:
    """Images in [0,1] shaped [N,1,H,W] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be [N,1,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"image/label count mismatch: {len(self.images)} vs {len(self.labels)}"
            )
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= 10):
            raise ValueError("labels must lie in [0, 10)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split)


def _read_header(data: bytes, expected_magic: int, n_dims: int, what: str):
    need = 4 * (1 + n_dims)
    if len(data) < need:
        raise IdxFormatError(f"{what}: truncated header ({len(data)} bytes)")
    fields = struct.unpack(f">{1 + n_dims}I", data[:need])
    if fields[0] != expected_magic:
        raise IdxFormatError(f"{what}: bad magic 0x{fields[0]:08x}")
    return fields[1:], data[need:]


def parse_idx_images(data: bytes) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Decode an IDX image file into a uint8 array [N,H,W] plus (N,H,W)."""
    (n, h, w), payload = _read_header(data, IMAGE_MAGIC, 3, "idx images")
    total = n * h * w
    if total > 1 << 34:
        raise IdxFormatError(f"idx images: dimensions overflow ({n}x{h}x{w})")
    if len(payload) < total:
        raise IdxFormatError(
            f"idx images: truncated payload ({len(payload)} bytes, need {total})"
        )
    if len(payload) > total:
        raise IdxFormatError(f"idx images: {len(payload) - total} trailing bytes")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w)
    return images, (n, h, w)


def parse_idx_labels(data: bytes, max_label: int = 9) -> np.ndarray:
    """Decode an IDX label file; values above ``max_label`` are rejected."""
    (n,), payload = _read_header(data, LABEL_MAGIC, 1, "idx labels")
    if len(payload) < n:
        raise IdxFormatError(f"idx labels: truncated payload ({len(payload)} bytes, need {n})")
    if len(payload) > n:
        raise IdxFormatError(f"idx labels: {len(payload) - n} trailing bytes")
    labels = np.frombuffer(payload, dtype=np.uint8)
    if labels.size and labels.max() > max_label:
        raise IdxFormatError(f"idx labels: value {labels.max()} exceeds {max_label}")
    return labels


def write_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    return struct.pack(">4I", IMAGE_MAGIC, n, h, w) + images.tobytes()


def write_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">2I", LABEL_MAGIC, len(labels)) + labels.tobytes()


def normalize(raw: np.ndarray) -> np.ndarray:
    """Map byte values to [0, 1] as v/255 exactly."""
    return np.asarray(raw, dtype=np.float32) / np.float32(255.0)


def _read_file(path: Path) -> bytes:
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _find_idx(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"missing {stem}[.gz] under {directory}")


def load_idx_split(directory, split: str) -> Dataset:
    """Load one split from IDX files in ``directory`` (plain or .gz)."""
    directory = Path(directory)
    image_stem, label_stem = MNIST_FILES[split]
    raw_images, _ = parse_idx_images(_read_file(_find_idx(directory, image_stem)))
    labels = parse_idx_labels(_read_file(_find_idx(directory, label_stem)))
    if len(raw_images) != len(labels):
        raise IdxFormatError(
            f"{split}: {len(raw_images)} images but {len(labels)} labels"
        )
    images = normalize(raw_images)[:, None, :, :]
    return Dataset(images, labels, split)


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    """Load train and test splits and enforce the MNIST profile
    (60000/10000 samples of 28x28)."""
    train = load_idx_split(directory, "train")
    test = load_idx_split(directory, "test")
    if train.images.shape != (60000, 1, 28, 28):
        raise ValueError(f"train split is not MNIST-shaped: {train.images.shape}")
    if test.images.shape != (10000, 1, 28, 28):
        raise ValueError(f"test split is not MNIST-shaped: {test.images.shape}")
    return train, test


def pixel_stats(dataset: Dataset) -> PixelRange:
    """Exact per-pixel extrema over a split, for offset-filter rescaling."""
    if len(dataset) == 0:
        raise ValueError("cannot compute pixel stats on an empty split")
    flat = dataset.images.reshape(len(dataset), -1)
    return PixelRange(flat.min(axis=0), flat.max(axis=0))


def batches(dataset: Dataset, size: int, seed: "int | Rng" = 0, shuffle: bool = True):
    """Yield (images, labels) batches; a trailing short batch is kept.

    Shuffling is a seeded permutation, so iteration order is reproducible.
    """
    if size < 1:
        raise ValueError("batch size must be >= 1")
    n = len(dataset)
    if shuffle:
        rng = seed if isinstance(seed, Rng) else Rng(seed)
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, size):
        idx = order[start : start + size]
        yield dataset.images[idx], dataset.labels[idx]


@dataclass
class SyntheticSpec:
    """Bar-position classification fixture, linearly separable at zero noise."""

    classes: int = 2
    per_class: int = 32
    size: int = 16
    pattern: str = "bright"  # bright bar on dark ground, or the reverse
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.classes <= 10:
            raise ValueError("classes must be in [2, 10]")
        if self.pattern not in ("bright", "dark"):
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.size < self.classes + 2:
            raise ValueError("image too small for the requested class count")


def synthetic(spec: SyntheticSpec) -> Dataset:
    """Images whose class is the position of a vertical bar.

    Class k places the bar at a fixed column; additive uniform noise widens
    the pixel histogram but never moves the bar, so labels are independent
    of the noise draw.
    """
    rng = Rng(spec.seed)
    s = spec.size
    columns = np.linspace(1, s - 2, spec.classes).round().astype(int)
    if len(set(columns.tolist())) != spec.classes:
        raise ValueError("image too small to separate bar positions")
    bg, fg = (0.0, 1.0) if spec.pattern == "bright" else (1.0, 0.0)
    n = spec.classes * spec.per_class
    images = np.full((n, 1, s, s), bg, dtype=np.float32)
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    for k, col in enumerate(columns):
        images[labels == k, 0, :, col] = fg
    if spec.noise > 0:
        jitter = rng.uniform(-spec.noise, spec.noise, images.shape, dtype=np.float32)
        images = np.clip(images + jitter, 0.0, 1.0)
    order = rng.split(1).permutation(n)
    return Dataset(images[order], labels[order], "synthetic")
