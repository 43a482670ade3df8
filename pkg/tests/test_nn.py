import numpy as np
import pytest
from scipy.signal import correlate2d

from bitflip import nn
from bitflip.nn import (APPROX_SIGN, CLIPPED_STE, IDENTITY_STE, BatchNorm,
                        BinaryActivation, BinaryConv2D, BinaryDense, ModelSpec,
                        RealDense, ShapeError, backward, batchnorm_refresh,
                        build_params, forward, pseudo_gradient, sign_binarize,
                        softmax_xent)


# ---------------------------------------------------------------------------
# sign_binarize
# ---------------------------------------------------------------------------

def test_sign_binarize_examples():
    np.testing.assert_array_equal(sign_binarize([0.3, -2.0]), [1.0, -1.0])
    np.testing.assert_array_equal(sign_binarize([0.0]), [1.0])


def test_sign_binarize_idempotent():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(50,))
    once = sign_binarize(w)
    np.testing.assert_array_equal(sign_binarize(once), once)


def test_sign_binarize_values_exact():
    rng = np.random.default_rng(1)
    out = sign_binarize(rng.normal(size=(200,)))
    assert np.all(np.abs(out) == 1.0)


def test_sign_binarize_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite"):
        sign_binarize([np.nan])
    with pytest.raises(ValueError, match="non-finite"):
        sign_binarize([np.inf, 1.0])


# ---------------------------------------------------------------------------
# pseudo_gradient
# ---------------------------------------------------------------------------

def test_pseudo_gradient_identity_passes_through():
    out = pseudo_gradient(IDENTITY_STE, np.array([0.7]), np.array([5.0]))
    np.testing.assert_array_equal(out, [0.7])


def test_pseudo_gradient_clipped_gate():
    out = pseudo_gradient(CLIPPED_STE, np.array([0.7]), np.array([1.5]))
    np.testing.assert_array_equal(out, [0.0])
    out = pseudo_gradient(CLIPPED_STE, np.array([0.7]), np.array([1.0]))
    np.testing.assert_array_equal(out, [0.7])  # gate inclusive at |w| = 1


def test_pseudo_gradient_approx_sign_value():
    # derivative factor at w=0.5 evaluates to 2 - 2*0.5 = 1.0
    out = pseudo_gradient(APPROX_SIGN, np.array([1.0]), np.array([0.5]))
    np.testing.assert_allclose(out, [1.0], rtol=0, atol=0)


@pytest.mark.parametrize("kind", [CLIPPED_STE, APPROX_SIGN])
def test_pseudo_gradient_zero_outside_support(kind):
    rng = np.random.default_rng(2)
    u = rng.normal(size=(100,))
    w = rng.uniform(1.0 + 1e-9, 10.0, size=(100,)) * rng.choice([-1, 1], size=100)
    np.testing.assert_array_equal(pseudo_gradient(kind, u, w), np.zeros(100))


def test_pseudo_gradient_identity_scale_invariant():
    rng = np.random.default_rng(3)
    u = rng.normal(size=(64,))
    w = rng.normal(size=(64,))
    for c in (0.25, 1.0, 7.5):
        np.testing.assert_array_equal(pseudo_gradient(IDENTITY_STE, u, w),
                                      pseudo_gradient(IDENTITY_STE, u, c * w))


def test_pseudo_gradient_shape_mismatch():
    with pytest.raises(ShapeError):
        pseudo_gradient(IDENTITY_STE, np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------------------
# forward: small exact cases
# ---------------------------------------------------------------------------

def test_real_dense_linear_map():
    model = ModelSpec(layers=[RealDense(1, 1)])
    params = [{"w": np.array([[2.0]]), "b": np.array([0.0])}]
    y, _ = forward(model, params, np.array([[3.0]]), nn.EVAL)
    np.testing.assert_array_equal(y, [[6.0]])


def test_binary_dense_dot():
    model = ModelSpec(layers=[BinaryDense(2, 1)])
    params = [{"w": np.array([[1.0], [-1.0]])}]
    y, _ = forward(model, params, np.array([[1.0, 1.0]]), nn.EVAL)
    np.testing.assert_array_equal(y, [[0.0]])


def test_forward_finite_after_glorot_init():
    model = ModelSpec(layers=[
        BinaryDense(12, 8), BatchNorm(8), BinaryActivation(), RealDense(8, 3)])
    params = build_params(model, seed=0)
    rng = np.random.default_rng(4)
    latent = nn.glorot_uniform((12, 8), rng)
    params[0]["w"] = sign_binarize(latent)
    y, _ = forward(model, params, rng.uniform(-1, 1, size=(16, 12)), nn.TRAIN)
    assert np.all(np.isfinite(y))


def test_forward_shape_error_names_layer():
    model = ModelSpec(layers=[RealDense(4, 2)])
    params = build_params(model, seed=0)
    with pytest.raises(ShapeError, match="layer 0"):
        forward(model, params, np.zeros((3, 5)), nn.EVAL)


def test_forward_rejects_nonfinite_input():
    model = ModelSpec(layers=[RealDense(2, 2)])
    params = build_params(model, seed=0)
    with pytest.raises(ValueError, match="non-finite"):
        forward(model, params, np.array([[1.0, np.nan]]), nn.EVAL)


def test_eval_forward_deterministic():
    model = ModelSpec(layers=[
        RealDense(6, 5), BatchNorm(5), BinaryActivation(), RealDense(5, 3)])
    params = build_params(model, seed=1)
    x = np.random.default_rng(5).uniform(-1, 1, size=(9, 6))
    y1, _ = forward(model, params, x, nn.EVAL)
    y2, _ = forward(model, params, x, nn.EVAL)
    np.testing.assert_array_equal(y1, y2)


# ---------------------------------------------------------------------------
# convolution vs an independent oracle
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_forward_matches_scipy(stride, pad):
    rng = np.random.default_rng(6)
    b, cin, cout, h, w, k = 2, 3, 4, 7, 6, 3
    x = rng.normal(size=(b, cin, h, w))
    wgt = rng.normal(size=(cout, cin, k, k))
    layer = BinaryConv2D(cin, cout, k, k, stride=stride, pad=pad)
    y, _ = nn._conv_forward(0, layer, {"w": wgt}, x)

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    for bi in range(b):
        for oi in range(cout):
            acc = sum(correlate2d(xp[bi, ci], wgt[oi, ci], mode="valid")
                      for ci in range(cin))
            np.testing.assert_allclose(y[bi, oi], acc[::stride, ::stride],
                                       rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0)])
def test_conv_backward_finite_difference(stride, pad):
    rng = np.random.default_rng(7)
    b, cin, cout, h, w, k = 2, 2, 3, 6, 5, 3
    x = rng.normal(size=(b, cin, h, w))
    wgt = rng.normal(size=(cout, cin, k, k))
    layer = BinaryConv2D(cin, cout, k, k, stride=stride, pad=pad)

    def loss_of(wv, xv, r):
        y, _ = nn._conv_forward(0, layer, {"w": wv}, xv)
        return float((y * r).sum())

    y, cache = nn._conv_forward(0, layer, {"w": wgt}, x)
    r = rng.normal(size=y.shape)
    dx, grads = nn._conv_backward(layer, cache, r)

    eps = 1e-6
    for arr, grad, rebuild in ((wgt, grads["w"], lambda v: loss_of(v, x, r)),
                               (x, dx, lambda v: loss_of(wgt, v, r))):
        flat = arr.ravel()
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = rebuild(arr)
            flat[j] = orig - eps
            dn = rebuild(arr)
            flat[j] = orig
            num[j] = (up - dn) / (2 * eps)
        np.testing.assert_allclose(grad.ravel(), num, rtol=1e-5, atol=1e-7)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_loss_uniform_logits_is_log_k():
    loss, _ = softmax_xent(np.array([[0.0, 0.0]]), np.array([0]))
    np.testing.assert_allclose(loss, np.log(2.0), rtol=0, atol=1e-15)
    loss4, _ = softmax_xent(np.zeros((3, 4)), np.array([1, 2, 3]))
    np.testing.assert_allclose(loss4, np.log(4.0), rtol=0, atol=1e-15)


def test_loss_nonnegative():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(32, 5)) * 3
    labels = rng.integers(0, 5, size=32)
    loss, _ = softmax_xent(logits, labels)
    assert loss >= 0.0


def test_backward_label_batch_mismatch():
    model = ModelSpec(layers=[RealDense(3, 2)])
    params = build_params(model, seed=0)
    _, cache = forward(model, params, np.zeros((4, 3)), nn.TRAIN)
    with pytest.raises(ShapeError):
        backward(model, cache, np.array([0, 1]))


def test_backward_requires_train_cache():
    model = ModelSpec(layers=[RealDense(3, 2)])
    params = build_params(model, seed=0)
    _, cache = forward(model, params, np.zeros((4, 3)), nn.EVAL)
    with pytest.raises(ValueError, match="train-mode"):
        backward(model, cache, np.zeros(4, dtype=int))


# ---------------------------------------------------------------------------
# gradients vs central finite differences (real parameters)
# ---------------------------------------------------------------------------

def _clone_params(params):
    return [{k: np.copy(v) for k, v in p.items()} for p in params]


def _loss_at(model, params, x, y):
    ps = _clone_params(params)   # train forward mutates running stats
    _, cache = forward(model, ps, x, nn.TRAIN)
    loss, _ = backward(model, cache, y)
    return loss


def test_real_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    model = ModelSpec(layers=[RealDense(6, 8), BatchNorm(8), RealDense(8, 3)])
    params = build_params(model, seed=3)
    # move away from the init's zeros/ones so every gradient path is exercised
    params[0]["b"] = rng.normal(size=8) * 0.1
    params[1]["gamma"] = rng.uniform(0.5, 1.5, size=8)
    params[1]["beta"] = rng.normal(size=8) * 0.1
    x = rng.normal(size=(16, 6))
    y = rng.integers(0, 3, size=16)

    _, cache = forward(model, _clone_params(params), x, nn.TRAIN)
    _, grads = backward(model, cache, y)

    h = 1e-5
    for i, name, g in grads.real_items(model):
        arr = params[i][name]
        flat = arr.ravel()
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = _loss_at(model, params, x, y)
            flat[j] = orig - h
            dn = _loss_at(model, params, x, y)
            flat[j] = orig
            num[j] = (up - dn) / (2 * h)
        np.testing.assert_allclose(
            g.ravel(), num, rtol=1e-4, atol=1e-7,
            err_msg=f"gradient mismatch at layer {i} param {name}")


def test_identity_ste_matches_real_twin_exactly():
    """With latent weights already in {-1,+1}, the straight-through gradient
    equals the exact gradient of the same network built from real layers."""
    rng = np.random.default_rng(10)
    w1 = sign_binarize(rng.normal(size=(6, 8)))
    w2 = sign_binarize(rng.normal(size=(8, 3)))
    x = rng.normal(size=(12, 6))
    y = rng.integers(0, 3, size=12)

    bin_model = ModelSpec(layers=[BinaryDense(6, 8), BatchNorm(8), BinaryDense(8, 3)])
    bin_params = build_params(bin_model, seed=0)
    bin_params[0]["w"], bin_params[2]["w"] = w1.copy(), w2.copy()

    twin_model = ModelSpec(layers=[RealDense(6, 8), BatchNorm(8), RealDense(8, 3)])
    twin_params = build_params(twin_model, seed=0)
    twin_params[0]["w"], twin_params[0]["b"] = w1.copy(), np.zeros(8)
    twin_params[2]["w"], twin_params[2]["b"] = w2.copy(), np.zeros(3)

    _, bc = forward(bin_model, bin_params, x, nn.TRAIN)
    bloss, bgrads = backward(bin_model, bc, y)
    _, tc = forward(twin_model, twin_params, x, nn.TRAIN)
    tloss, tgrads = backward(twin_model, tc, y)

    assert bloss == tloss
    for i in (0, 2):
        ste = pseudo_gradient(IDENTITY_STE, bgrads.per_layer[i]["w"], bin_params[i]["w"])
        np.testing.assert_array_equal(ste, tgrads.per_layer[i]["w"])


def test_gradient_shapes_align_with_params():
    model = ModelSpec(layers=[
        BinaryDense(5, 4), BatchNorm(4), BinaryActivation(), RealDense(4, 2)])
    params = build_params(model, seed=0)
    params[0]["w"] = sign_binarize(np.random.default_rng(0).normal(size=(5, 4)))
    _, cache = forward(model, params, np.zeros((3, 5)), nn.TRAIN)
    _, grads = backward(model, cache, np.zeros(3, dtype=int))
    for p, g in zip(params, grads.per_layer):
        for name in g:
            assert g[name].shape == p[name].shape


# ---------------------------------------------------------------------------
# batch norm behavior
# ---------------------------------------------------------------------------

def test_bn_train_updates_running_stats():
    model = ModelSpec(layers=[BatchNorm(3)])
    params = build_params(model, seed=0)
    x = np.random.default_rng(11).normal(loc=2.0, size=(64, 3))
    forward(model, params, x, nn.TRAIN)
    np.testing.assert_allclose(params[0]["running_mean"], 0.1 * x.mean(axis=0),
                               rtol=1e-12)


def test_bn_eval_uses_running_stats():
    model = ModelSpec(layers=[BatchNorm(2, epsilon=0.0)])
    params = build_params(model, seed=0)
    params[0]["running_mean"] = np.array([1.0, -1.0])
    params[0]["running_var"] = np.array([4.0, 0.25])
    y, _ = forward(model, params, np.array([[3.0, 0.0]]), nn.EVAL)
    np.testing.assert_allclose(y, [[1.0, 2.0]], rtol=1e-12)


def test_batchnorm_refresh_constant_input():
    model = ModelSpec(layers=[RealDense(2, 2), BatchNorm(2)])
    params = build_params(model, seed=0)
    c = np.full((40, 2), 0.7)
    batchnorm_refresh(model, params, c, batch_size=16)
    expect = c[:1] @ params[0]["w"] + params[0]["b"]
    np.testing.assert_allclose(params[1]["running_mean"], expect[0], rtol=1e-12)
    # float rounding in sumsq/n - mean^2 leaves ~1e-16; the 1e-5 epsilon guard dominates
    np.testing.assert_allclose(params[1]["running_var"], np.zeros(2), atol=1e-12)


def test_batchnorm_refresh_idempotent():
    model = ModelSpec(layers=[RealDense(3, 4), BatchNorm(4), BinaryActivation(),
                              RealDense(4, 2)])
    params = build_params(model, seed=2)
    x = np.random.default_rng(12).uniform(-1, 1, size=(50, 3))
    batchnorm_refresh(model, params, x, batch_size=16)
    mean1 = params[1]["running_mean"].copy()
    var1 = params[1]["running_var"].copy()
    batchnorm_refresh(model, params, x, batch_size=16)
    np.testing.assert_array_equal(params[1]["running_mean"], mean1)
    np.testing.assert_array_equal(params[1]["running_var"], var1)


def test_batchnorm_refresh_empty_dataset():
    model = ModelSpec(layers=[BatchNorm(2)])
    params = build_params(model, seed=0)
    with pytest.raises(ValueError, match="empty"):
        batchnorm_refresh(model, params, np.zeros((0, 2)))


# ---------------------------------------------------------------------------
# ModelSpec
# ---------------------------------------------------------------------------

def test_modelspec_json_roundtrip():
    model = ModelSpec(layers=[
        BinaryConv2D(3, 8, 3, 3, stride=2, pad=1), BatchNorm(8), BinaryActivation(),
        BinaryDense(8 * 16 * 16, 32), BatchNorm(32), BinaryActivation(),
        RealDense(32, 10)])
    again = ModelSpec.from_json(model.to_json())
    assert again == model
    assert ModelSpec.from_json(again.to_json()) == again


def test_modelspec_wire_format_keys():
    d = ModelSpec(layers=[BinaryDense(784, 256)]).to_json_dict()
    assert d == {"layers": [{"type": "binary_dense", "in": 784, "out": 256}],
                 "loss": "softmax_xent"}


def test_modelspec_validate_incompatible():
    model = ModelSpec(layers=[RealDense(4, 3), RealDense(5, 2)])
    with pytest.raises(ShapeError, match="layer 1"):
        model.validate(input_shape=(4,))


def test_modelspec_require_binary():
    model = ModelSpec(layers=[RealDense(4, 2)])
    model.validate(input_shape=(4,))
    with pytest.raises(ValueError, match="binary"):
        model.validate(input_shape=(4,), require_binary=True)


def test_modelspec_conv_shape_chain():
    model = ModelSpec(layers=[BinaryConv2D(1, 4, 3, 3, stride=2, pad=1),
                              BatchNorm(4), BinaryActivation(),
                              RealDense(4 * 14 * 14, 10)])
    model.validate(input_shape=(1, 28, 28))
    with pytest.raises(ShapeError):
        model.validate(input_shape=(1, 10, 10))
