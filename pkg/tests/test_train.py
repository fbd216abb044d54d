import numpy as np
import pytest

from conftest import MNIST_DIR, mnist_available

from f4.data import load_idx_dataset, synthetic_dataset
from f4.ecq import empirical_entropy
from f4.mlp import init_model
from f4.train import (
    batch_indices,
    load_checkpoint,
    model_entropy,
    model_sparsity,
    pretrain,
    save_checkpoint,
    ste_finetune,
)


def small_task(seed=0):
    train = synthetic_dataset(800, 16, 4, seed=seed, spread=5.0)
    test = synthetic_dataset(300, 16, 4, seed=seed, split=1, spread=5.0)
    model = init_model((16, 24, 4), seed=seed)
    return model, train, test


def test_batch_indices_cover_and_repeat():
    a = [np.sort(i) for i in batch_indices(100, 32, seed=1, epoch=0)]
    flat = np.concatenate(a)
    assert np.array_equal(np.sort(flat), np.arange(100))
    b1 = list(batch_indices(100, 32, 1, 0))
    b2 = list(batch_indices(100, 32, 1, 0))
    assert all(np.array_equal(x, y) for x, y in zip(b1, b2))
    b3 = list(batch_indices(100, 32, 1, 1))
    assert not all(np.array_equal(x, y) for x, y in zip(b1, b3))


def test_pretrain_learns_and_logs():
    model, train, test = small_task()
    rows = pretrain(model, train, test, epochs=12, lr=3e-3, batch_size=64, seed=0)
    assert len(rows) == 12
    assert rows[-1]["accuracy"] > 0.9
    assert rows[-1]["loss"] < rows[0]["loss"]


def test_ste_finetune_returns_quantized_state():
    model, train, test = small_task(seed=2)
    pretrain(model, train, test, epochs=10, lr=3e-3, batch_size=64, seed=2)
    qlayers, rows = ste_finetune(
        model, train, test, epochs=3, lam=1e-3, lr=1e-3, omega_lr=1e-3,
        batch_size=64, seed=2,
    )
    assert len(qlayers) == 2 and len(rows) == 3
    assert rows[-1]["accuracy"] > 0.85
    assert 0.0 <= rows[-1]["entropy"] <= 4.0
    assert 0.0 <= rows[-1]["sparsity"] <= 1.0
    assert 0.0 <= model_sparsity(qlayers) <= 1.0


def test_checkpoint_roundtrip_fp(tmp_path):
    model, train, test = small_task(seed=3)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, model, meta={"preset": "custom"})
    back, qlayers, meta = load_checkpoint(path)
    assert qlayers is None
    assert meta["preset"] == "custom"
    for a, b in zip(model.layers, back.layers):
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.bias, b.bias)


def test_checkpoint_roundtrip_quantized(tmp_path):
    model, train, test = small_task(seed=4)
    pretrain(model, train, test, epochs=2, lr=3e-3, batch_size=64, seed=4)
    qlayers, _ = ste_finetune(
        model, train, test, epochs=1, lam=1e-3, lr=1e-3, omega_lr=1e-3,
        batch_size=64, seed=4,
    )
    path = tmp_path / "ck.npz"
    save_checkpoint(path, model, qlayers, meta={"lam": 1e-3})
    back, qback, meta = load_checkpoint(path)
    assert meta["lam"] == 1e-3
    for a, b in zip(qlayers, qback):
        assert np.array_equal(a.codes, b.codes)
        assert np.array_equal(a.codebook.omega, b.codebook.omega)
        assert np.array_equal(a.codebook.priors, b.codebook.priors)
    # shadow alias restored
    for i, ql in enumerate(qback):
        assert ql.shadow_weights is back.layers[i].weights


def test_checkpoint_bytes_deterministic(tmp_path):
    model, *_ = small_task(seed=5)
    p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
    save_checkpoint(p1, model, meta={"seed": 5})
    save_checkpoint(p2, model, meta={"seed": 5})
    assert p1.read_bytes() == p2.read_bytes()


def test_load_checkpoint_rejects_garbage(tmp_path):
    from f4.errors import DataFormatError

    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(DataFormatError):
        load_checkpoint(bad)


def test_model_entropy_weighted():
    model, train, test = small_task(seed=6)
    from f4.ecq import quantize_model

    qlayers = quantize_model(model, 0.0)
    h = model_entropy(qlayers)
    per = [empirical_entropy(ql.codes) for ql in qlayers]
    assert min(per) <= h <= max(per)


@pytest.mark.skipif(not mnist_available(), reason="MNIST files not present")
def test_lambda_lowers_entropy_on_mnist_subset():
    train = load_idx_dataset(
        MNIST_DIR / "train-images-idx3-ubyte", MNIST_DIR / "train-labels-idx1-ubyte"
    ).subset(1000)
    test = load_idx_dataset(
        MNIST_DIR / "t10k-images-idx3-ubyte", MNIST_DIR / "t10k-labels-idx1-ubyte"
    ).subset(500)
    entropies = {}
    for lam in (0.0, 1e-3):
        per_seed = []
        for seed in range(2):
            model = init_model((784, 300, 100, 10), seed=seed)
            pretrain(model, train, test, epochs=1, lr=1e-3, batch_size=100, seed=seed)
            qlayers, _ = ste_finetune(
                model, train, test, epochs=2, lam=lam, lr=1e-3, omega_lr=1e-3,
                batch_size=10, seed=seed,
            )  # 2 epochs x 100 steps = 200 STE steps
            per_seed.append(model_entropy(qlayers))
        entropies[lam] = np.mean(per_seed)
    assert entropies[1e-3] < entropies[0.0]
