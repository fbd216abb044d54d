import numpy as np
import pytest

from f4.ecq import (
    Codebook,
    AdamState,
    DEFAULT_OMEGA,
    QuantizedLayer,
    adam_update,
    centroid_gradient,
    ecl_assign,
    empirical_entropy,
    init_codebook,
    quantize_model,
    sparsity,
    ste_train_step,
    subset_sums,
)
from f4.mlp import init_model, mlp_forward, softmax_cross_entropy


# ---------------------------------------------------------------- codebook


def test_subset_sums_structure():
    omega = np.array([1.0, 2.0, 4.0, 8.0])
    sums = subset_sums(omega)
    assert sums[0] == 0.0
    assert np.array_equal(sums, np.arange(16.0))


def test_subset_sums_two_basis_example():
    # value of code 0b0011 is the sum of the first two coefficients
    omega = np.array([-1.43, -0.77, 0.13, 2.53])
    assert subset_sums(omega)[0b0011] == pytest.approx(-2.2)


def test_codebook_centroids_track_omega():
    cb = Codebook(np.array([0.5, -0.25, 1.0, 2.0]))
    c1 = cb.centroids.copy()
    assert c1[0] == 0.0
    assert c1[0b0101] == 0.5 + 1.0
    cb.omega = cb.omega * 2
    assert np.array_equal(cb.centroids, 2 * c1)
    assert abs(cb.priors.sum() - 1.0) < 1e-12


# ----------------------------------------------------------------- entropy


def test_entropy_constant_codes():
    assert empirical_entropy(np.full((5, 5), 7, dtype=np.uint8)) == 0.0


def test_entropy_uniform_codes():
    codes = np.repeat(np.arange(16, dtype=np.uint8), 3)
    assert abs(empirical_entropy(codes) - 4.0) < 1e-12


def test_entropy_half_quarter_quarter():
    codes = np.array([1, 1, 2, 3], dtype=np.uint8)
    # closed form: 0.5*1 + 0.25*2 + 0.25*2 = 1.5 bits
    assert abs(empirical_entropy(codes) - 1.5) < 1e-12


def test_entropy_bounds_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        codes = rng.integers(0, 16, size=rng.integers(1, 200), dtype=np.uint8)
        h = empirical_entropy(codes)
        assert 0.0 <= h <= 4.0
        assert (h == 0.0) == (np.unique(codes).size == 1)


def test_entropy_empty_rejected():
    with pytest.raises(ValueError):
        empirical_entropy(np.empty((0,), dtype=np.uint8))


# ------------------------------------------------------------ init_codebook


def test_init_codebook_gaussian_weights():
    rng = np.random.default_rng(1)
    w = rng.standard_normal(4000)
    omega = init_codebook(w)
    sums = np.sort(subset_sums(omega))
    assert np.all(np.diff(sums) > 0), "subset sums must be distinct"
    # the basis values span roughly the weight range
    assert omega.min() < -0.5 and omega.max() > 0.5


def test_init_codebook_sign_coverage():
    rng = np.random.default_rng(2)
    half = rng.uniform(0.2, 1.0, 500)
    w = np.concatenate([half, -half])
    omega = init_codebook(w)
    assert (omega < 0).any() and (omega > 0).any()


def test_init_codebook_constant_weights():
    omega = init_codebook(np.full(64, 0.7))
    sums = np.sort(subset_sums(omega))
    assert np.all(np.diff(sums) > 0)


def test_init_codebook_all_zero_default():
    omega = init_codebook(np.zeros(10))
    assert np.array_equal(omega, DEFAULT_OMEGA)
    assert np.all(np.diff(np.sort(subset_sums(omega))) > 0)


def test_init_codebook_empty_rejected():
    with pytest.raises(ValueError):
        init_codebook(np.empty(0))


# -------------------------------------------------------------- ecl_assign


def test_ecl_lambda_zero_is_nearest_centroid():
    rng = np.random.default_rng(3)
    cb = Codebook(np.array([-0.9, -0.3, 0.4, 1.1]))
    w = rng.uniform(-2, 2, size=(13, 7))
    codes = ecl_assign(w, cb, 0.0)
    # brute-force nearest centroid over all 16 values
    expect = np.abs(w[..., None] - cb.centroids).argmin(axis=-1)
    assert np.array_equal(codes, expect.astype(np.uint8))


def test_ecl_huge_lambda_collapses_to_one_code():
    rng = np.random.default_rng(4)
    cb = Codebook(np.array([-0.9, -0.3, 0.4, 1.1]))
    w = rng.uniform(-2, 2, size=200)
    codes = ecl_assign(w, cb, 1e6)
    assert np.unique(codes).size == 1
    assert empirical_entropy(codes) == 0.0


def test_ecl_matches_bruteforce_with_converged_priors():
    rng = np.random.default_rng(5)
    cb = Codebook(init_codebook(rng.standard_normal(64)))
    w = rng.standard_normal(8)
    lam = 0.1
    codes = ecl_assign(w, cb, lam)
    # oracle: per-weight exhaustive argmin using the converged priors
    cost = (w[:, None] - cb.centroids[None, :]) ** 2 + lam * -np.log2(cb.priors)
    expect = np.array([np.argmin(row) for row in cost])
    assert np.array_equal(codes, expect.astype(np.uint8))


def test_ecl_negative_lambda_rejected():
    cb = Codebook(DEFAULT_OMEGA)
    with pytest.raises(ValueError):
        ecl_assign(np.zeros(4), cb, -0.1)


def test_ecl_priors_sum_to_one():
    rng = np.random.default_rng(6)
    cb = Codebook(init_codebook(rng.standard_normal(256)))
    ecl_assign(rng.standard_normal(256), cb, 0.01)
    assert abs(cb.priors.sum() - 1.0) < 1e-12
    assert np.all(cb.priors > 0)


def test_sparsity_nondecreasing_in_lambda():
    lams = [0.0, 1e-3, 1e-2, 1e-1, 1.0]
    mean_sparsity = []
    for lam in lams:
        vals = []
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            w = rng.standard_normal(2000) * 0.3
            cb = Codebook(init_codebook(w))
            codes = ecl_assign(w, cb, lam)
            vals.append(sparsity(codes))
        mean_sparsity.append(np.mean(vals))
    diffs = np.diff(mean_sparsity)
    assert np.all(diffs >= -1e-12), mean_sparsity


# ------------------------------------------------------- centroid_gradient


def test_centroid_gradient_all_zero_codes():
    g = centroid_gradient(np.ones((3, 3)), np.zeros((3, 3), dtype=np.uint8))
    assert np.array_equal(g, np.zeros(4))


def test_centroid_gradient_single_weight():
    g = centroid_gradient(np.array([[2.5]]), np.array([[0b0011]], dtype=np.uint8))
    assert np.array_equal(g, [2.5, 2.5, 0.0, 0.0])


def test_centroid_gradient_shape_mismatch():
    with pytest.raises(ValueError):
        centroid_gradient(np.zeros((2, 2)), np.zeros((2, 3), dtype=np.uint8))


def test_centroid_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    model = init_model((16, 16, 4), seed=20)
    batch = rng.standard_normal((6, 16))
    labels = rng.integers(0, 4, size=6)
    qlayers = quantize_model(model, lam=0.0)

    def loss_at(layer_idx, omega):
        override = {}
        for i, ql in enumerate(qlayers):
            om = omega if i == layer_idx else ql.codebook.omega
            override[i] = subset_sums(om)[ql.codes]
        logits, _ = mlp_forward(model, batch, weight_override=override)
        return softmax_cross_entropy(logits, labels)[0]

    from f4.mlp import mlp_backward

    override = {i: ql.dequantized() for i, ql in enumerate(qlayers)}
    logits, cache = mlp_forward(model, batch, weight_override=override)
    grads = mlp_backward(model, cache, labels)
    step = 1e-6
    for li, ql in enumerate(qlayers):
        analytic = centroid_gradient(grads[f"layers.{li}.weights"], ql.codes)
        for i in range(4):
            om_up = ql.codebook.omega.copy()
            om_up[i] += step
            om_dn = ql.codebook.omega.copy()
            om_dn[i] -= step
            fd = (loss_at(li, om_up) - loss_at(li, om_dn)) / (2 * step)
            denom = max(abs(fd), abs(analytic[i]), 1e-8)
            assert abs(fd - analytic[i]) / denom < 1e-5


# --------------------------------------------------------------------- adam


def test_adam_zero_gradient_no_change():
    st = AdamState(lr=0.1)
    p = {"x": np.array([1.0, -2.0])}
    out = adam_update(p, {"x": np.zeros(2)}, st)
    assert np.array_equal(out["x"], p["x"])


def test_adam_first_step_is_signed_lr():
    st = AdamState(lr=0.05)
    out = adam_update({"x": np.array([1.0, 1.0])}, {"x": np.array([3.0, -0.2])}, st)
    expect = 1.0 - 0.05 * np.sign([3.0, -0.2]) / (1 + st.eps)
    assert np.allclose(out["x"], expect, atol=1e-9)


def test_adam_descends_quadratic():
    st = AdamState(lr=0.1)
    x = np.array([1.0])
    for _ in range(100):
        x = adam_update({"x": x}, {"x": 2 * x}, st)["x"]
    assert abs(x[0]) < 0.5


def test_adam_rejects_nonfinite_gradient():
    st = AdamState()
    with pytest.raises(FloatingPointError, match="layers.0.weights"):
        adam_update(
            {"layers.0.weights": np.ones(2)},
            {"layers.0.weights": np.array([1.0, np.nan])},
            st,
        )


# ------------------------------------------------------------------- STE


def make_quantized_toy(seed=30):
    rng = np.random.default_rng(seed)
    model = init_model((6, 8, 3), seed=seed)
    qlayers = quantize_model(model, lam=0.0)
    batch = rng.standard_normal((5, 6))
    labels = rng.integers(0, 3, size=5)
    return model, qlayers, batch, labels


def test_ste_zero_lr_is_noop():
    model, qlayers, batch, labels = make_quantized_toy()
    w_before = [l.weights.copy() for l in model.layers]
    codes_before = [ql.codes.copy() for ql in qlayers]
    omega_before = [ql.codebook.omega.copy() for ql in qlayers]
    ste_train_step(model, qlayers, batch, labels, AdamState(lr=0.0), AdamState(lr=0.0))
    for l, w in zip(model.layers, w_before):
        assert np.array_equal(l.weights, w)
    for ql, c, om in zip(qlayers, codes_before, omega_before):
        assert np.array_equal(ql.codes, c)
        assert np.array_equal(ql.codebook.omega, om)


def test_ste_updates_shadow_not_codes():
    model, qlayers, batch, labels = make_quantized_toy()
    codes_before = [ql.codes.copy() for ql in qlayers]
    w_before = [l.weights.copy() for l in model.layers]
    loss = ste_train_step(
        model, qlayers, batch, labels, AdamState(lr=1e-2), AdamState(lr=1e-3)
    )
    assert np.isfinite(loss)
    for ql, c in zip(qlayers, codes_before):
        assert np.array_equal(ql.codes, c), "codes must stay frozen within a step"
    changed = any(
        not np.array_equal(l.weights, w) for l, w in zip(model.layers, w_before)
    )
    assert changed, "shadow weights must receive the STE update"
    for i, ql in enumerate(qlayers):
        assert ql.shadow_weights is model.layers[i].weights


def test_ste_loss_computed_on_quantized_weights():
    model, qlayers, batch, labels = make_quantized_toy()
    override = {i: ql.dequantized() for i, ql in enumerate(qlayers)}
    logits, _ = mlp_forward(model, batch, weight_override=override)
    expect, _ = softmax_cross_entropy(logits, labels)
    got = ste_train_step(
        model, qlayers, batch, labels, AdamState(lr=0.0), AdamState(lr=0.0)
    )
    assert got == pytest.approx(float(expect), rel=1e-12)


def test_ste_rejects_missing_shadow():
    model, qlayers, batch, labels = make_quantized_toy()
    qlayers[0] = QuantizedLayer(
        qlayers[0].codes, qlayers[0].codebook, qlayers[0].shadow_weights.copy()
    )
    with pytest.raises(ValueError, match="alias"):
        ste_train_step(model, qlayers, batch, labels, AdamState(), AdamState())
