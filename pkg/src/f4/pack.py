"""Assemble runnable containers from quantized models.

Bridges the trainer and the datapath: calibrates per-layer activation
scales from the dequantized float reference, converts each codebook to
shared-exponent fixed point, folds batchnorm into the per-channel output
scale, picks the smallest storage format per layer, and composes the
scale chain

    alpha1[o] = act_scale * 2**omega_exp * bn_scale[o]
    alpha2    = 1 / act_scale(next layer)

so that the integer pipeline reproduces the float layer function.
"""

import numpy as np

from .codec import ContainerLayer, ModelContainer, select_format
from .datapath import BasisWeights, simulate_model, DatapathTrace
from .mlp import fold_batchnorm, mlp_forward
from .codec import tiles_per_row, TILE

INT8_TOP = 127.0
# Logits land in int16; leaving headroom below 2**15 keeps resolution high
# while tolerating eval data that exceeds the calibration range.
LOGIT_TOP = 8192.0


def _dequant_override(qlayers):
    return {i: ql.dequantized() for i, ql in enumerate(qlayers)}


def calibrate_activation_scales(model, qlayers, calib_samples):
    """Per-layer input scales plus the final logit scale.

    Runs the dequantized float reference on the calibration batch and
    scales each layer's input range onto the int8 grid (the logits onto
    their int16 headroom). A dead range degenerates to scale 1.
    """
    override = _dequant_override(qlayers)
    scales = [max(float(np.abs(calib_samples).max()), 1e-12) / INT8_TOP]
    last = len(model.layers) - 1
    # one forward pass caches every layer's pre-activation output
    _, cache = mlp_forward(
        model, calib_samples, train=False, weight_override=override
    )
    for i in range(len(model.layers)):
        h = cache[i]["h"]
        out = np.maximum(h, 0.0) if i != last else h
        top = float(np.abs(out).max())
        divisor = LOGIT_TOP if i == last else INT8_TOP
        scales.append(top / divisor if top > 0 else 1.0)
    return scales


def build_container(model, qlayers, calib_samples):
    """ModelContainer ready for simulate_model, formats chosen per layer."""
    if len(qlayers) != len(model.layers):
        raise ValueError("quantized layers do not match model depth")
    scales = calibrate_activation_scales(model, qlayers, calib_samples)
    layers = []
    last = len(model.layers) - 1
    for i, (layer, ql) in enumerate(zip(model.layers, qlayers)):
        padded_in = tiles_per_row(layer.in_features) * TILE
        basis = BasisWeights.from_float(ql.codebook.omega, padded_in)
        act_scale = scales[i]
        alpha1, bias_f = fold_batchnorm(
            layer, dequant_scale=act_scale * 2.0**basis.exp
        )
        layers.append(
            ContainerLayer(
                compressed=select_format(ql.codes),
                omega_int=basis.omega_int,
                omega_exp=basis.exp,
                alpha1=alpha1.astype(np.float32),
                bias=bias_f.astype(np.float32),
                alpha2=float(np.float32(1.0 / scales[i + 1])),
                act_scale=float(np.float32(act_scale)),
                relu=i != last,
            )
        )
    return ModelContainer(layers)


def dequantized_accuracy(model, qlayers, dataset, batch_size=1024):
    """Float64 reference accuracy with the dequantized weights."""
    override = _dequant_override(qlayers)
    hits = 0
    for lo in range(0, len(dataset), batch_size):
        hi = min(lo + batch_size, len(dataset))
        logits, _ = mlp_forward(
            model, dataset.samples[lo:hi], train=False, weight_override=override
        )
        hits += int((logits.argmax(axis=1) == dataset.labels[lo:hi]).sum())
    return hits / len(dataset)


def simulated_accuracy(container, dataset, batch_size=256, traces=None):
    """Accuracy of the integer pipeline; traces accumulate when given."""
    if traces is None:
        traces = [DatapathTrace() for _ in container.layers]
    hits = 0
    for lo in range(0, len(dataset), batch_size):
        hi = min(lo + batch_size, len(dataset))
        logits, _ = simulate_model(container, dataset.samples[lo:hi], traces)
        hits += int((logits.argmax(axis=1) == dataset.labels[lo:hi]).sum())
    return hits / len(dataset), traces
