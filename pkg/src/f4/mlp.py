"""Minimal dense MLP engine in 64-bit floats.

Serves both as the training engine and as the full-precision reference
oracle for the integer datapath simulator. Layers are Linear -> optional
BatchNorm -> ReLU, with identity after the last layer. Loss is softmax
cross-entropy with sum reduction over the batch.
"""

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class DenseLayer:
    """Fully-connected layer, optionally followed by batchnorm.

    weights: float64 [out, in]; bias: float64 [out]. Batchnorm keeps
    per-output gamma/beta plus running mean/var used at inference time.
    """

    weights: np.ndarray
    bias: np.ndarray
    has_batchnorm: bool = False
    bn_gamma: np.ndarray = None
    bn_beta: np.ndarray = None
    bn_mean: np.ndarray = None
    bn_var: np.ndarray = None
    bn_eps: float = BN_EPS

    def __post_init__(self):
        out, din = self.weights.shape
        if out < 1 or din < 1:
            raise ValueError("layer dimensions must be >= 1")
        if self.bias.shape != (out,):
            raise ValueError("bias shape does not match weight rows")
        if self.has_batchnorm:
            for name in ("bn_gamma", "bn_beta", "bn_mean", "bn_var"):
                v = getattr(self, name)
                if v is None or v.shape != (out,):
                    raise ValueError(f"{name} missing or mis-shaped")
            if np.any(self.bn_var <= 0):
                raise ValueError("batchnorm variance must be strictly positive")

    @property
    def out_features(self):
        return self.weights.shape[0]

    @property
    def in_features(self):
        return self.weights.shape[1]


@dataclass
class MlpModel:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_features} -> {nxt.in_features}"
                )

    @property
    def in_features(self):
        return self.layers[0].in_features

    @property
    def num_classes(self):
        return self.layers[-1].out_features

    def is_hardware_conform(self, limit=512):
        """True when every layer dimension fits the accelerator (<= 512)."""
        return all(
            l.in_features <= limit and l.out_features <= limit for l in self.layers
        )


def init_model(dims, batchnorm=False, seed=0):
    """He-normal initialized MLP with the given feature sizes."""
    rng = np.random.default_rng(seed)
    layers = []
    for din, dout in zip(dims, dims[1:]):
        w = rng.standard_normal((dout, din)) * np.sqrt(2.0 / din)
        layer = DenseLayer(w, np.zeros(dout))
        if batchnorm:
            layer.has_batchnorm = True
            layer.bn_gamma = np.ones(dout)
            layer.bn_beta = np.zeros(dout)
            layer.bn_mean = np.zeros(dout)
            layer.bn_var = np.ones(dout)
        layers.append(layer)
    return MlpModel(layers)


PRESETS = {
    # MNIST benchmark net: 784-300-100-10, no batchnorm.
    "lenet-300-100": dict(dims=(784, 300, 100, 10), batchnorm=False),
    # Hand-gesture style net: four FC layers with batchnorm after each.
    # The real sensor feature width is dataset-specific; 512 is the default
    # input size and can be overridden.
    "mlp-hr": dict(dims=(512, 512, 256, 128, 12), batchnorm=True),
    # Speech-command style net: six hidden layers. Batchnorm enabled to
    # match the other custom preset.
    "mlp-gsc": dict(dims=(512, 512, 512, 256, 256, 128, 128, 12), batchnorm=True),
}


def preset_model(name, seed=0, input_dim=None):
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    spec = PRESETS[name]
    dims = list(spec["dims"])
    if input_dim is not None:
        dims[0] = input_dim
    return init_model(dims, batchnorm=spec["batchnorm"], seed=seed)


def mlp_forward(model, batch, train=False, weight_override=None):
    """Forward pass. Returns (logits, cache) where cache feeds mlp_backward.

    train=True uses batch statistics in batchnorm layers (and updates the
    running estimates); train=False uses the stored running statistics.
    weight_override maps layer index -> weight matrix to use instead of the
    stored one (the quantized-weight path during STE training).
    """
    if batch.ndim != 2 or batch.shape[1] != model.in_features:
        raise ValueError(
            f"batch width {batch.shape} does not match model input "
            f"{model.in_features}"
        )
    x = batch
    cache = []
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        w = layer.weights if weight_override is None else weight_override.get(i, layer.weights)
        z = x @ w.T + layer.bias
        entry = {"x": x, "z": z, "w": w}
        if layer.has_batchnorm:
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                n = z.shape[0]
                layer.bn_mean = (1 - BN_MOMENTUM) * layer.bn_mean + BN_MOMENTUM * mu
                unbiased = var * n / max(n - 1, 1)
                layer.bn_var = (1 - BN_MOMENTUM) * layer.bn_var + BN_MOMENTUM * unbiased
            else:
                mu, var = layer.bn_mean, layer.bn_var
            inv_std = 1.0 / np.sqrt(var + layer.bn_eps)
            xhat = (z - mu) * inv_std
            h = layer.bn_gamma * xhat + layer.bn_beta
            entry.update(mu=mu, inv_std=inv_std, xhat=xhat)
        else:
            h = z
        a = np.maximum(h, 0.0) if i != last else h
        entry["h"] = h
        cache.append(entry)
        x = a
    return x, cache


def softmax_cross_entropy(logits, labels):
    """Sum-reduced softmax cross-entropy and its gradient w.r.t. logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    n = logits.shape[0]
    loss = -log_probs[np.arange(n), labels].sum()
    dlogits = exp / total
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits


def mlp_backward(model, cache, labels):
    """Gradients of the sum-reduced cross-entropy loss.

    Returns a dict keyed "layers.{i}.{param}" covering weights, bias and,
    where present, bn_gamma/bn_beta. Shapes mirror the parameters.
    """
    if len(cache) != len(model.layers):
        raise ValueError("cache does not match model depth")
    logits = cache[-1]["h"]
    if logits.shape[0] != labels.shape[0]:
        raise ValueError("label batch does not match cached forward batch")
    _, grad = softmax_cross_entropy(logits, labels)
    grads = {}
    last = len(model.layers) - 1
    for i in range(last, -1, -1):
        layer = model.layers[i]
        entry = cache[i]
        da = grad
        dh = da if i == last else da * (entry["h"] > 0)
        if layer.has_batchnorm:
            xhat, inv_std = entry["xhat"], entry["inv_std"]
            n = dh.shape[0]
            grads[f"layers.{i}.bn_gamma"] = (dh * xhat).sum(axis=0)
            grads[f"layers.{i}.bn_beta"] = dh.sum(axis=0)
            dxhat = dh * layer.bn_gamma
            # Backprop through the batch statistics themselves.
            dz = (
                dxhat
                - dxhat.mean(axis=0)
                - xhat * (dxhat * xhat).mean(axis=0)
            ) * inv_std
        else:
            dz = dh
        grads[f"layers.{i}.weights"] = dz.T @ entry["x"]
        grads[f"layers.{i}.bias"] = dz.sum(axis=0)
        grad = dz @ entry["w"]
    return grads


def fold_batchnorm(layer, dequant_scale=1.0):
    """Fold batchnorm (running stats) and dequantization into one affine.

    Returns (alpha1, bias_f) such that for the layer's inference function
    y = BN(Wx + b):   y == alpha1/dequant_scale * (W @ x) + bias_f,
    i.e. alpha1 multiplies a raw dot product that is still missing the
    dequantization factor ``dequant_scale`` (activation and basis-weight
    scales in the integer pipeline; 1.0 for a pure float fold).
    """
    if layer.has_batchnorm:
        if np.any(layer.bn_var <= 0):
            raise ValueError("batchnorm variance must be strictly positive")
        s = layer.bn_gamma / np.sqrt(layer.bn_var + layer.bn_eps)
        alpha1 = dequant_scale * s
        bias_f = s * (layer.bias - layer.bn_mean) + layer.bn_beta
    else:
        alpha1 = np.full(layer.out_features, dequant_scale, dtype=np.float64)
        bias_f = layer.bias.copy()
    return alpha1, bias_f


def predict(model, samples, batch_size=512, weight_override=None):
    """Inference-mode argmax labels."""
    out = np.empty(samples.shape[0], dtype=np.int64)
    for lo in range(0, samples.shape[0], batch_size):
        hi = min(lo + batch_size, samples.shape[0])
        logits, _ = mlp_forward(
            model, samples[lo:hi], train=False, weight_override=weight_override
        )
        out[lo:hi] = logits.argmax(axis=1)
    return out


def accuracy(model, dataset, weight_override=None):
    pred = predict(model, dataset.samples, weight_override=weight_override)
    return float((pred == dataset.labels).mean())
