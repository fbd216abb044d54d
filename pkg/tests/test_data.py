import gzip
import struct

import numpy as np
import pytest

from f4.data import Dataset, load_idx_dataset, synthetic_dataset
from f4.errors import DataFormatError

from conftest import MNIST_DIR, mnist_available


def idx_images_bytes(images):
    n, rows, cols = images.shape
    return struct.pack(">IIII", 0x00000803, n, rows, cols) + images.tobytes()


def idx_labels_bytes(labels):
    return struct.pack(">II", 0x00000801, len(labels)) + labels.tobytes()


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(7)
    images = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "labs.idx"
    ip.write_bytes(idx_images_bytes(images))
    lp.write_bytes(idx_labels_bytes(labels))
    return ip, lp, images, labels


def test_load_idx_roundtrip(idx_pair):
    ip, lp, images, labels = idx_pair
    ds = load_idx_dataset(ip, lp, num_classes=3)
    assert ds.samples.shape == (5, 12)
    assert np.array_equal(ds.labels, labels)
    expect = images.reshape(5, -1).astype(np.float64) / 255.0
    assert np.array_equal(ds.samples, expect)
    assert ds.samples.min() >= 0.0 and ds.samples.max() <= 1.0


def test_load_idx_gzip_transparent(idx_pair, tmp_path):
    ip, lp, images, labels = idx_pair
    gzp = tmp_path / "imgs2.idx.gz"
    with gzip.open(gzp, "wb") as f:
        f.write(ip.read_bytes())
    ds = load_idx_dataset(gzp, lp, num_classes=3)
    assert ds.samples.shape == (5, 12)
    # Bare path resolves to the .gz sibling when only that exists.
    ds2 = load_idx_dataset(tmp_path / "imgs2.idx", lp, num_classes=3)
    assert np.array_equal(ds.samples, ds2.samples)


def test_bad_magic_rejected(idx_pair, tmp_path):
    ip, lp, _, labels = idx_pair
    bad = tmp_path / "bad.idx"
    bad.write_bytes(struct.pack(">II", 0x00000801, len(labels)) + labels.tobytes())
    with pytest.raises(DataFormatError, match="magic"):
        load_idx_dataset(bad, lp)
    # labels file with an images magic is just as wrong
    with pytest.raises(DataFormatError, match="magic"):
        load_idx_dataset(ip, ip)


def test_truncated_file_rejected(idx_pair, tmp_path):
    ip, lp, *_ = idx_pair
    trunc = tmp_path / "trunc.idx"
    trunc.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(DataFormatError, match="payload|truncated"):
        load_idx_dataset(trunc, lp)


def test_count_mismatch_rejected(idx_pair, tmp_path):
    ip, _, _, labels = idx_pair
    lp4 = tmp_path / "short.idx"
    lp4.write_bytes(idx_labels_bytes(labels[:4]))
    with pytest.raises(DataFormatError, match="count"):
        load_idx_dataset(ip, lp4)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(DataFormatError, match="not found"):
        load_idx_dataset(tmp_path / "nope.idx", tmp_path / "nope2.idx")


@pytest.mark.skipif(not mnist_available(), reason="MNIST files not present")
def test_mnist_shapes():
    train = load_idx_dataset(
        MNIST_DIR / "train-images-idx3-ubyte", MNIST_DIR / "train-labels-idx1-ubyte"
    )
    test = load_idx_dataset(
        MNIST_DIR / "t10k-images-idx3-ubyte", MNIST_DIR / "t10k-labels-idx1-ubyte"
    )
    assert len(train) == 60000 and train.dim == 784
    assert len(test) == 10000 and test.dim == 784
    assert train.num_classes == 10


def test_dataset_validation():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((3, 2)), np.zeros(2, dtype=np.int64), 2)
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((3, 2)), np.array([0, 1, 5]), 3)


def test_synthetic_dataset_deterministic():
    a = synthetic_dataset(100, 16, 4, seed=3)
    b = synthetic_dataset(100, 16, 4, seed=3)
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.labels, b.labels)
    assert a.samples.min() >= 0.0 and a.samples.max() <= 1.0
    assert set(np.unique(a.labels)) <= set(range(4))
