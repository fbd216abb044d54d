"""Entropy-constrained 4-bit weight quantization.

Each layer gets four basis coefficients whose subset sums span 16
representable weight values (code 0b0000 is exact zero). Assignment uses
an entropy-constrained Lloyd step that weighs squared distortion against
the ideal code length of each value under the empirical code
distribution; cluster centers are deliberately NOT moved by the
assignment loop. The basis coefficients instead train by gradient:
the gradient of each coefficient is the sum of weight gradients over the
positions whose code includes it, and updates flow through ADAM.
Training uses the straight-through estimator: the forward/backward pass
runs on dequantized weights while updates land on the full-precision
shadow copies.
"""

from dataclasses import dataclass, field

import numpy as np

from .mlp import mlp_forward, mlp_backward, softmax_cross_entropy

NUM_BASES = 4
NUM_CODES = 16

# Binary membership of each code in each basis: _MASKS[k, i] = bit i of k.
_MASKS = ((np.arange(NUM_CODES)[:, None] >> np.arange(NUM_BASES)) & 1).astype(
    np.float64
)

# Fallback basis for degenerate (all-zero) layers: binary-ratio spacing
# guarantees 16 distinct subset sums.
DEFAULT_OMEGA = np.array([0.0625, 0.125, 0.25, 0.5])


def subset_sums(omega):
    """The 16 values representable as subset sums of the 4 coefficients."""
    return _MASKS @ np.asarray(omega, dtype=np.float64)


@dataclass
class Codebook:
    """Four basis coefficients plus the empirical prior over the 16 codes."""

    omega: np.ndarray
    priors: np.ndarray = None

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if self.omega.shape != (NUM_BASES,):
            raise ValueError("omega must hold exactly 4 coefficients")
        if self.priors is None:
            self.priors = np.full(NUM_CODES, 1.0 / NUM_CODES)

    @property
    def centroids(self):
        # Re-derived on every access so they can never drift from omega.
        return subset_sums(self.omega)

    def dequantize(self, codes):
        return self.centroids[codes]


def empirical_entropy(codes):
    """First-order entropy of the code distribution, in bits per weight."""
    codes = np.asarray(codes)
    if codes.size == 0:
        raise ValueError("cannot compute entropy of an empty code matrix")
    counts = np.bincount(codes.reshape(-1), minlength=NUM_CODES)
    p = counts / codes.size
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def sparsity(codes):
    """Fraction of codes that are exact zero (code 0b0000)."""
    codes = np.asarray(codes)
    return float((codes == 0).mean()) if codes.size else 0.0


# Deadzone basis shape: subset sums are the 16 distinct grid points
# {-14,-11,-10,-9,-7,-6,-5,-2, 0, 3,4,5,7,8,9,12} * u. No value lands at
# +-1u, so exact zero owns the widest region of the grid.
_BASIS_SHAPE = np.array([-14.0, 3.0, 4.0, 5.0])
_STEP_FLOOR_FRACTION = 0.35


def _fit_step(values, floor):
    """Grid step u minimizing quantization distortion onto the basis grid.

    Scans log-spaced candidates (subsampled for big layers), never below
    ``floor``.
    """
    v = values if values.size <= 20000 else values[:: values.size // 20000 + 1]
    grid = subset_sums(_BASIS_SHAPE)
    amax = float(np.abs(v).max())
    candidates = np.geomspace(amax / 64, amax, 96)
    candidates = candidates[candidates >= floor]
    if candidates.size == 0:
        return floor
    best_u, best_err = candidates[0], np.inf
    for u in candidates:
        err = float(((v[:, None] - grid[None, :] * u) ** 2).min(axis=1).sum())
        if err < best_err:
            best_u, best_err = u, err
    return best_u


def init_codebook(weights):
    """Pick 4 basis coefficients for a fresh layer.

    Uses the scaled deadzone basis u * (-14, 3, 4, 5). A free-form basis
    fit (e.g. k-means centers) can produce near-canceling subset sums that
    park a representable value right next to zero and steal the zero
    code's probability mass, which breaks the entropy penalty's pull
    toward sparsity; the deadzone structure keeps every nonzero value at
    least 2u away from zero. The step u minimizes grid distortion subject
    to a floor of 0.35x the mean nonzero magnitude, wide enough that the
    zero code stays the dominant symbol for zero-peaked weight
    distributions. Training moves the four coefficients freely afterwards.
    An identically-zero layer gets DEFAULT_OMEGA.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise ValueError("cannot initialize a codebook from an empty layer")
    nonzero = w[w != 0]
    if nonzero.size == 0:
        return DEFAULT_OMEGA.copy()
    mean_mag = float(np.abs(nonzero).mean())
    u = _fit_step(nonzero, floor=_STEP_FLOOR_FRACTION * mean_mag)
    omega = u * _BASIS_SHAPE
    sums = np.sort(subset_sums(omega))
    assert np.all(np.diff(sums) > 0), "deadzone basis must give distinct sums"
    return omega


def ecl_assign(shadow_weights, codebook, lam, max_rounds=50):
    """Entropy-constrained assignment of weights to the 16 codes.

    Minimizes (w - c_k)^2 + lam * (-log2 P_k) per weight, alternating with
    prior re-estimation until the assignment reaches a fixed point (or
    max_rounds). Starts from the priors currently stored in the codebook
    (uniform for a fresh codebook) and leaves the converged empirical
    priors there. Cluster centers are not touched. Priors are floored at
    1/(16 N) so no code is ever locked out by an infinite code length.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    w = np.asarray(shadow_weights, dtype=np.float64).reshape(-1)
    n = w.size
    centroids = codebook.centroids
    priors = codebook.priors
    floor = 1.0 / (NUM_CODES * n)
    codes = None
    scores = np.empty((n, NUM_CODES))
    for _ in range(max_rounds):
        # argmin_k (w-c_k)^2 + lam*len_k == argmin_k -2*w*c_k + (c_k^2 + lam*len_k)
        offsets = centroids * centroids + lam * -np.log2(priors)
        np.multiply.outer(w, -2.0 * centroids, out=scores)
        scores += offsets
        new_codes = scores.argmin(axis=1)  # ties break toward the lowest code
        counts = np.bincount(new_codes, minlength=NUM_CODES)
        priors = np.maximum(counts / n, floor)
        priors = priors / priors.sum()
        if codes is not None and np.array_equal(new_codes, codes):
            break
        codes = new_codes
    codebook.priors = priors
    return codes.reshape(np.shape(shadow_weights)).astype(np.uint8)


def centroid_gradient(weight_grad, codes):
    """Per-basis gradient: sum of weight gradients where the basis bit is set."""
    weight_grad = np.asarray(weight_grad)
    codes = np.asarray(codes)
    if weight_grad.shape != codes.shape:
        raise ValueError("gradient and code shapes differ")
    out = np.empty(NUM_BASES)
    for i in range(NUM_BASES):
        out[i] = weight_grad[((codes >> i) & 1) == 1].sum()
    return out


@dataclass
class AdamState:
    """ADAM accumulator shared by a named group of parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)


def adam_update(params, grads, state):
    """One bias-corrected ADAM step. Returns the updated parameter dict."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m, v = state.moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.moments[name] = (m, v)
        out[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


@dataclass
class QuantizedLayer:
    """Code matrix plus codebook for one layer.

    shadow_weights aliases the owning DenseLayer's weight tensor: STE
    updates land there while the codes stay frozen between reassignments.
    """

    codes: np.ndarray
    codebook: Codebook
    shadow_weights: np.ndarray

    def dequantized(self):
        return self.codebook.dequantize(self.codes)


def quantize_model(model, lam):
    """Fresh codebooks + ECL assignment for every layer of the model."""
    qlayers = []
    for layer in model.layers:
        cb = Codebook(init_codebook(layer.weights))
        codes = ecl_assign(layer.weights, cb, lam)
        qlayers.append(QuantizedLayer(codes, cb, layer.weights))
    return qlayers


def collect_params(model):
    """Named parameter dict matching the gradient keys of mlp_backward."""
    params = {}
    for i, layer in enumerate(model.layers):
        params[f"layers.{i}.weights"] = layer.weights
        params[f"layers.{i}.bias"] = layer.bias
        if layer.has_batchnorm:
            params[f"layers.{i}.bn_gamma"] = layer.bn_gamma
            params[f"layers.{i}.bn_beta"] = layer.bn_beta
    return params


def _write_back(model, updated):
    for i, layer in enumerate(model.layers):
        layer.weights[:] = updated[f"layers.{i}.weights"]
        layer.bias[:] = updated[f"layers.{i}.bias"]
        if layer.has_batchnorm:
            layer.bn_gamma[:] = updated[f"layers.{i}.bn_gamma"]
            layer.bn_beta[:] = updated[f"layers.{i}.bn_beta"]


def ste_train_step(model, qlayers, batch, labels, adam, adam_omega, update_omega=True):
    """One straight-through training step.

    Forward and backward run on the dequantized weights; the resulting
    weight gradients update the full-precision shadow weights, the
    per-basis reductions of those gradients update the basis coefficients
    (skipped when update_omega is False, the coefficient cadence knob).
    Codes are left untouched (reassignment is scheduled by the caller).
    Returns the batch loss.
    """
    if len(qlayers) != len(model.layers):
        raise ValueError("quantized layers do not match model depth")
    for i, ql in enumerate(qlayers):
        if ql.shadow_weights is not model.layers[i].weights:
            raise ValueError(f"layer {i} shadow weights do not alias the model")
    override = {i: ql.dequantized() for i, ql in enumerate(qlayers)}
    logits, cache = mlp_forward(model, batch, train=True, weight_override=override)
    loss, _ = softmax_cross_entropy(logits, labels)
    grads = mlp_backward(model, cache, labels)
    _write_back(model, adam_update(collect_params(model), grads, adam))
    if update_omega:
        omegas = {
            f"layers.{i}.omega": ql.codebook.omega for i, ql in enumerate(qlayers)
        }
        omega_grads = {
            f"layers.{i}.omega": centroid_gradient(
                grads[f"layers.{i}.weights"], ql.codes
            )
            for i, ql in enumerate(qlayers)
        }
        new_omegas = adam_update(omegas, omega_grads, adam_omega)
        for i, ql in enumerate(qlayers):
            ql.codebook.omega = new_omegas[f"layers.{i}.omega"]
    return float(loss)
