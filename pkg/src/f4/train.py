"""Training loops and checkpoint files.

Two phases: full-precision pretraining, then straight-through fine-tuning
under the entropy-constrained quantizer with an end-of-epoch code
reassignment. Every run is deterministic for a given seed: batch order
comes from a per-epoch seeded shuffle and checkpoints are written with
fixed zip timestamps so reruns are byte-identical.
"""

import io
import json
import zipfile

import numpy as np
from numpy.lib import format as npformat

from .ecq import (
    AdamState,
    Codebook,
    QuantizedLayer,
    adam_update,
    collect_params,
    ecl_assign,
    empirical_entropy,
    quantize_model,
    sparsity,
    ste_train_step,
    _write_back,
)
from .errors import DataFormatError
from .mlp import DenseLayer, MlpModel, mlp_backward, mlp_forward, softmax_cross_entropy
from .pack import dequantized_accuracy
from .mlp import accuracy as model_accuracy


def batch_indices(n, batch_size, seed, epoch):
    """Seeded shuffle, stable across reruns for (seed, epoch)."""
    order = np.random.default_rng((seed, epoch)).permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def model_entropy(qlayers):
    """Weight-count-weighted mean code entropy in bits per weight."""
    total = sum(ql.codes.size for ql in qlayers)
    if not total:
        return 0.0
    return sum(empirical_entropy(ql.codes) * ql.codes.size for ql in qlayers) / total


def model_sparsity(qlayers):
    total = sum(ql.codes.size for ql in qlayers)
    if not total:
        return 0.0
    return sum(int((ql.codes == 0).sum()) for ql in qlayers) / total


def _epoch_lr(lr, epoch, decay_epoch, decay_factor):
    if decay_epoch and epoch >= decay_epoch:
        return lr * decay_factor
    return lr


def pretrain(model, train_ds, eval_ds, epochs, lr, batch_size, seed, log=None,
             lr_decay_epoch=0, lr_decay_factor=0.2):
    """Full-precision phase; mutates the model, returns the log rows."""
    adam = AdamState(lr=lr)
    rows = []
    for epoch in range(epochs):
        adam.lr = _epoch_lr(lr, epoch, lr_decay_epoch, lr_decay_factor)
        total_loss = 0.0
        for idx in batch_indices(len(train_ds), batch_size, seed, epoch):
            logits, cache = mlp_forward(model, train_ds.samples[idx], train=True)
            loss, _ = softmax_cross_entropy(logits, train_ds.labels[idx])
            grads = mlp_backward(model, cache, train_ds.labels[idx])
            _write_back(model, adam_update(collect_params(model), grads, adam))
            total_loss += loss
        row = {
            "phase": "pretrain",
            "epoch": epoch,
            "loss": total_loss / len(train_ds),
            "accuracy": model_accuracy(model, eval_ds),
            "entropy": "",
            "sparsity": "",
        }
        rows.append(row)
        if log:
            log(row)
    return rows


def ste_finetune(
    model,
    train_ds,
    eval_ds,
    epochs,
    lam,
    lr,
    omega_lr,
    batch_size,
    seed,
    reassign_every=1,
    omega_update_every=1,
    log=None,
    lr_decay_epoch=0,
    lr_decay_factor=0.2,
):
    """Quantized phase; returns (qlayers, log rows).

    Codes are reassigned every ``reassign_every`` steps (default: every
    step, matching the quantize/pass/update iteration loop; slower
    cadences let the shadow weights drift a grid step before snapping,
    which scrambles the co-adapted quantized configuration). Warm priors
    make the per-step reassignment converge in a round or two.
    """
    qlayers = quantize_model(model, lam)
    adam = AdamState(lr=lr)
    adam_omega = AdamState(lr=omega_lr)
    rows = []
    step = 0
    for epoch in range(epochs):
        adam.lr = _epoch_lr(lr, epoch, lr_decay_epoch, lr_decay_factor)
        adam_omega.lr = _epoch_lr(omega_lr, epoch, lr_decay_epoch, lr_decay_factor)
        total_loss = 0.0
        for idx in batch_indices(len(train_ds), batch_size, seed + 1, epoch):
            step += 1
            total_loss += ste_train_step(
                model,
                qlayers,
                train_ds.samples[idx],
                train_ds.labels[idx],
                adam,
                adam_omega,
                update_omega=step % omega_update_every == 0,
            )
            if step % reassign_every == 0:
                for ql in qlayers:
                    ql.codes = ecl_assign(ql.shadow_weights, ql.codebook, lam)
        row = {
            "phase": "ste",
            "epoch": epoch,
            "loss": total_loss / len(train_ds),
            "accuracy": dequantized_accuracy(model, qlayers, eval_ds),
            "entropy": model_entropy(qlayers),
            "sparsity": model_sparsity(qlayers),
        }
        rows.append(row)
        if log:
            log(row)
    return qlayers, rows


# ------------------------------------------------------------- checkpoints


def _savez_deterministic(path, arrays):
    """np.load-compatible zip with fixed timestamps (byte-stable reruns)."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            npformat.write_array(
                buf, np.ascontiguousarray(arr), allow_pickle=False
            )
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def save_checkpoint(path, model, qlayers=None, meta=None):
    arrays = {}
    meta = dict(meta or {})
    meta["n_layers"] = len(model.layers)
    meta["quantized"] = qlayers is not None
    for i, layer in enumerate(model.layers):
        arrays[f"layers.{i}.weights"] = layer.weights
        arrays[f"layers.{i}.bias"] = layer.bias
        if layer.has_batchnorm:
            arrays[f"layers.{i}.bn_gamma"] = layer.bn_gamma
            arrays[f"layers.{i}.bn_beta"] = layer.bn_beta
            arrays[f"layers.{i}.bn_mean"] = layer.bn_mean
            arrays[f"layers.{i}.bn_var"] = layer.bn_var
    if qlayers is not None:
        for i, ql in enumerate(qlayers):
            arrays[f"layers.{i}.codes"] = ql.codes
            arrays[f"layers.{i}.omega"] = ql.codebook.omega
            arrays[f"layers.{i}.priors"] = ql.codebook.priors
    arrays["meta"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    )
    _savez_deterministic(path, arrays)


def load_checkpoint(path):
    """Returns (model, qlayers or None, meta). Shadow aliases are rebuilt."""
    try:
        data = np.load(path)
    except (OSError, ValueError) as e:
        raise DataFormatError(f"cannot read checkpoint {path}: {e}") from None
    if "meta" not in data:
        raise DataFormatError(f"{path} is not a checkpoint (missing meta)")
    meta = json.loads(bytes(data["meta"]).decode())
    layers = []
    for i in range(meta["n_layers"]):
        kw = {}
        if f"layers.{i}.bn_gamma" in data:
            kw = dict(
                has_batchnorm=True,
                bn_gamma=data[f"layers.{i}.bn_gamma"],
                bn_beta=data[f"layers.{i}.bn_beta"],
                bn_mean=data[f"layers.{i}.bn_mean"],
                bn_var=data[f"layers.{i}.bn_var"],
            )
        layers.append(
            DenseLayer(data[f"layers.{i}.weights"], data[f"layers.{i}.bias"], **kw)
        )
    model = MlpModel(layers)
    qlayers = None
    if meta.get("quantized"):
        qlayers = []
        for i, layer in enumerate(model.layers):
            cb = Codebook(data[f"layers.{i}.omega"], data[f"layers.{i}.priors"])
            qlayers.append(
                QuantizedLayer(data[f"layers.{i}.codes"], cb, layer.weights)
            )
    return model, qlayers, meta
