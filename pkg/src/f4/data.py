"""Dataset ingestion: IDX image/label files and synthetic benchmark data."""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Flat feature matrix plus integer class labels.

    samples: float64 [N, d], features normalized to [0, 1] for image data.
    labels:  int64 [N], values in [0, num_classes).
    """

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise DataFormatError("samples must be a 2-D matrix")
        if self.labels.shape != (self.samples.shape[0],):
            raise DataFormatError(
                f"label count {self.labels.shape} does not match "
                f"sample count {self.samples.shape[0]}"
            )
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise DataFormatError("label out of range for num_classes")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]

    def subset(self, n, seed=None):
        """First n samples, or a seeded random sample without replacement."""
        n = min(n, len(self))
        if seed is None:
            idx = np.arange(n)
        else:
            idx = np.random.default_rng(seed).permutation(len(self))[:n]
        return Dataset(self.samples[idx], self.labels[idx], self.num_classes)


def _read_file(path):
    """Read a file, transparently decompressing .gz."""
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            path = gz
        else:
            raise DataFormatError(f"dataset file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _parse_idx(raw, expect_magic, path):
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise DataFormatError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    body = raw[header:]
    if len(body) < count:
        raise DataFormatError(
            f"{path}: payload holds {len(body)} bytes, header implies {count}"
        )
    data = np.frombuffer(body[:count], dtype=np.uint8)
    return data.reshape(dims)


def load_idx_dataset(images_path, labels_path, num_classes=10):
    """Load an IDX image/label file pair into a Dataset.

    Images are flattened row-major and scaled by 1/255 into [0, 1].
    Accepts plain or gzip-compressed files (``.gz`` suffix, applied
    automatically when only the compressed file exists).
    """
    images = _parse_idx(_read_file(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_file(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    samples = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(samples, labels.astype(np.int64), num_classes)


def synthetic_dataset(n, dim, num_classes, seed, split=0, spread=2.5):
    """Seeded Gaussian-blob classification set for benchmarks and tests.

    Class centers depend only on ``seed`` (the task identity); sample noise
    additionally depends on ``split`` so train/test splits of the same task
    share centers but not samples. Features are squashed into [0, 1] with a
    task-level affine map so the data matches the range contract of image
    datasets.
    """
    center_rng = np.random.default_rng(seed)
    centers = center_rng.standard_normal((num_classes, dim))
    centers *= spread / np.linalg.norm(centers, axis=1, keepdims=True)
    rng = np.random.default_rng((seed, split + 1))
    labels = rng.integers(0, num_classes, size=n)
    samples = centers[labels] + rng.standard_normal((n, dim))
    # squash with a fixed task-level range so all splits share the map
    lo = centers.min() - 5.0
    hi = centers.max() + 5.0
    samples = np.clip((samples - lo) / (hi - lo), 0.0, 1.0)
    return Dataset(samples, labels.astype(np.int64), num_classes)
