"""Forward/backward machinery for binarized networks.

Layers are described declaratively (ModelSpec) and parameters live in plain
per-layer dicts of float64 numpy arrays. The layer set is fixed: binarized
dense/conv, batch norm, sign-activation with a configurable pseudo-gradient,
real-valued dense, and a softmax cross-entropy head. Binary weight layers
expect their weights to be {-1,+1} already; callers binarize (or own the
signs directly) before calling forward.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# pseudo-gradient kinds
IDENTITY_STE = "identity_ste"
CLIPPED_STE = "clipped_ste"
APPROX_SIGN = "approx_sign"
PSEUDO_GRADIENT_KINDS = (IDENTITY_STE, CLIPPED_STE, APPROX_SIGN)

# forward modes
TRAIN = "train"
EVAL = "eval"

BINARY_WEIGHT_TYPES = ("binary_dense", "binary_conv2d")


class ShapeError(ValueError):
    """Tensor shapes incompatible with a layer or operation."""


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def sign_binarize(w: np.ndarray) -> np.ndarray:
    """Map elementwise to {-1.0, +1.0}; zero maps to +1."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite weight")
    return np.where(w >= 0.0, 1.0, -1.0)


def pseudo_gradient(kind: str, upstream: np.ndarray, w_latent: np.ndarray) -> np.ndarray:
    """Backward map through sign().

    identity_ste passes `upstream` through unchanged; clipped_ste zeroes it
    where |w_latent| > 1; approx_sign scales by (2 - 2|w_latent|) on
    |w_latent| < 1 and is zero outside.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    w_latent = np.asarray(w_latent, dtype=np.float64)
    if upstream.shape != w_latent.shape:
        raise ShapeError(
            f"pseudo_gradient: upstream shape {upstream.shape} != latent shape {w_latent.shape}"
        )
    if kind == IDENTITY_STE:
        return upstream.copy()
    if kind == CLIPPED_STE:
        return np.where(np.abs(w_latent) <= 1.0, upstream, 0.0)
    if kind == APPROX_SIGN:
        a = np.abs(w_latent)
        return np.where(a < 1.0, upstream * (2.0 - 2.0 * a), 0.0)
    raise ValueError(f"unknown pseudo-gradient kind: {kind!r}")


def glorot_uniform(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Uniform init on [-L, L] with L = sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = _fans(shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _fans(shape: tuple) -> tuple[int, int]:
    if len(shape) == 2:           # dense: (in, out)
        return shape[0], shape[1]
    if len(shape) == 4:           # conv: (out_ch, in_ch, kh, kw)
        o, c, kh, kw = shape
        return c * kh * kw, o * kh * kw
    raise ShapeError(f"no fan convention for shape {shape}")


# ---------------------------------------------------------------------------
# Layer descriptors and the model graph
# ---------------------------------------------------------------------------

@dataclass
class BinaryDense:
    in_features: int
    out_features: int
    type: str = field(default="binary_dense", init=False)


@dataclass
class RealDense:
    in_features: int
    out_features: int
    type: str = field(default="real_dense", init=False)


@dataclass
class BinaryConv2D:
    in_channels: int
    out_channels: int
    kh: int
    kw: int
    stride: int = 1
    pad: int = 0
    type: str = field(default="binary_conv2d", init=False)


@dataclass
class BatchNorm:
    features: int
    momentum: float = 0.9
    epsilon: float = 1e-5
    type: str = field(default="batch_norm", init=False)


@dataclass
class BinaryActivation:
    pseudo_grad: str = CLIPPED_STE
    type: str = field(default="binary_activation", init=False)


@dataclass
class ModelSpec:
    """Ordered layer graph plus the loss head."""

    layers: list
    loss: str = "softmax_xent"

    def binary_layer_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.type in BINARY_WEIGHT_TYPES]

    def num_classes(self) -> int:
        for l in reversed(self.layers):
            if l.type in ("binary_dense", "real_dense"):
                return l.out_features
            if l.type == "binary_conv2d":
                return l.out_channels
        raise ValueError("model has no weight layer")

    def validate(self, input_shape: Optional[tuple] = None, require_binary: bool = False) -> None:
        """Check adjacent layer compatibility.

        `input_shape` is the per-sample shape, e.g. (784,) or (1, 28, 28);
        without it, conv chains and conv->dense joins are checked at forward
        time instead. `require_binary` additionally demands at least one
        binary weight layer (a training-entry requirement).
        """
        if self.loss != "softmax_xent":
            raise ValueError(f"unsupported loss: {self.loss!r}")
        if not self.layers:
            raise ValueError("model has no layers")
        if require_binary and not self.binary_layer_indices():
            raise ValueError("model has no binary weight layer")

        cur = tuple(input_shape) if input_shape is not None else None
        for i, l in enumerate(self.layers):
            t = l.type
            if t in ("binary_dense", "real_dense"):
                if cur is not None:
                    flat = int(np.prod(cur))
                    if flat != l.in_features:
                        raise ShapeError(
                            f"layer {i} ({t}): expected {l.in_features} input features, got {flat}"
                        )
                cur = (l.out_features,)
            elif t == "binary_conv2d":
                if cur is not None:
                    if len(cur) != 3 or cur[0] != l.in_channels:
                        raise ShapeError(
                            f"layer {i} (binary_conv2d): expected (C={l.in_channels}, H, W), got {cur}"
                        )
                    _, h, w = cur
                    oh = (h + 2 * l.pad - l.kh) // l.stride + 1
                    ow = (w + 2 * l.pad - l.kw) // l.stride + 1
                    if oh < 1 or ow < 1:
                        raise ShapeError(f"layer {i} (binary_conv2d): kernel larger than input {cur}")
                    cur = (l.out_channels, oh, ow)
                else:
                    cur = None
            elif t == "batch_norm":
                if cur is not None:
                    feats = cur[0] if len(cur) == 3 else int(np.prod(cur))
                    if feats != l.features:
                        raise ShapeError(
                            f"layer {i} (batch_norm): expected {l.features} features, got {feats}"
                        )
            elif t == "binary_activation":
                if l.pseudo_grad not in PSEUDO_GRADIENT_KINDS:
                    raise ValueError(
                        f"layer {i} (binary_activation): unknown pseudo_grad {l.pseudo_grad!r}"
                    )
            else:
                raise ValueError(f"layer {i}: unknown layer type {t!r}")

    # -- JSON wire format: {"layers": [{"type": ..., ...}], "loss": "softmax_xent"} --

    def to_json_dict(self) -> dict:
        out = []
        for l in self.layers:
            if l.type in ("binary_dense", "real_dense"):
                out.append({"type": l.type, "in": l.in_features, "out": l.out_features})
            elif l.type == "binary_conv2d":
                out.append({"type": l.type, "in_ch": l.in_channels, "out_ch": l.out_channels,
                            "kh": l.kh, "kw": l.kw, "stride": l.stride, "pad": l.pad})
            elif l.type == "batch_norm":
                out.append({"type": l.type, "features": l.features,
                            "momentum": l.momentum, "epsilon": l.epsilon})
            elif l.type == "binary_activation":
                out.append({"type": l.type, "pseudo_grad": l.pseudo_grad})
        return {"layers": out, "loss": self.loss}

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelSpec":
        layers = []
        for i, ld in enumerate(d.get("layers", [])):
            t = ld.get("type")
            try:
                if t == "binary_dense":
                    layers.append(BinaryDense(int(ld["in"]), int(ld["out"])))
                elif t == "real_dense":
                    layers.append(RealDense(int(ld["in"]), int(ld["out"])))
                elif t == "binary_conv2d":
                    layers.append(BinaryConv2D(int(ld["in_ch"]), int(ld["out_ch"]),
                                               int(ld["kh"]), int(ld["kw"]),
                                               int(ld.get("stride", 1)), int(ld.get("pad", 0))))
                elif t == "batch_norm":
                    layers.append(BatchNorm(int(ld["features"]),
                                            float(ld.get("momentum", 0.9)),
                                            float(ld.get("epsilon", 1e-5))))
                elif t == "binary_activation":
                    layers.append(BinaryActivation(ld.get("pseudo_grad", CLIPPED_STE)))
                else:
                    raise ValueError(f"layers[{i}]: unknown layer type {t!r}")
            except KeyError as e:
                raise ValueError(f"layers[{i}] ({t}): missing field {e.args[0]!r}") from None
        spec = cls(layers=layers, loss=d.get("loss", "softmax_xent"))
        spec.validate()
        return spec

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, s: str) -> "ModelSpec":
        return cls.from_json_dict(json.loads(s))


def binary_weight_shape(layer) -> tuple:
    if layer.type == "binary_dense":
        return (layer.in_features, layer.out_features)
    if layer.type == "binary_conv2d":
        return (layer.out_channels, layer.in_channels, layer.kh, layer.kw)
    raise ValueError(f"{layer.type} has no binary weight")


def build_params(model: ModelSpec, seed: int) -> list[dict]:
    """Per-layer parameter dicts.

    Real dense layers get Glorot weights and zero bias; batch norm gets
    gamma=1, beta=0, running stats (0, 1). Binary weight slots start as
    zeros placeholders: the optimizer state owns the actual signs and
    refreshes params[i]["w"] before every forward.
    """
    params: list[dict] = []
    for i, l in enumerate(model.layers):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        if l.type == "binary_dense":
            params.append({"w": np.zeros((l.in_features, l.out_features))})
        elif l.type == "real_dense":
            params.append({"w": glorot_uniform((l.in_features, l.out_features), rng),
                           "b": np.zeros(l.out_features)})
        elif l.type == "binary_conv2d":
            params.append({"w": np.zeros((l.out_channels, l.in_channels, l.kh, l.kw))})
        elif l.type == "batch_norm":
            params.append({"gamma": np.ones(l.features), "beta": np.zeros(l.features),
                           "running_mean": np.zeros(l.features),
                           "running_var": np.ones(l.features)})
        else:
            params.append({})
    return params


TRAINABLE_REAL = {"real_dense": ("w", "b"), "batch_norm": ("gamma", "beta")}


@dataclass
class LayerGradients:
    """Gradients aligned 1:1 with model.layers; binary weight entries hold
    the straight-through gradient at the binarized weights."""

    per_layer: list

    def binary_items(self, model: ModelSpec):
        for i in model.binary_layer_indices():
            yield i, self.per_layer[i]["w"]

    def real_items(self, model: ModelSpec):
        for i, l in enumerate(model.layers):
            for name in TRAINABLE_REAL.get(l.type, ()):
                yield i, name, self.per_layer[i][name]


@dataclass
class ForwardCache:
    layer_caches: list
    logits: np.ndarray
    mode: str


# ---------------------------------------------------------------------------
# Per-layer forward/backward
# ---------------------------------------------------------------------------

def _dense_forward(i, layer, p, a):
    in_shape = a.shape
    if a.ndim > 2:
        a = a.reshape(a.shape[0], -1)
    if a.ndim != 2 or a.shape[1] != layer.in_features:
        raise ShapeError(
            f"layer {i} ({layer.type}): expected (B, {layer.in_features}), got {in_shape}"
        )
    y = a @ p["w"]
    if layer.type == "real_dense":
        y = y + p["b"]
    return y, (a, in_shape, p["w"])


def _dense_backward(layer, cache, dy):
    a, in_shape, w = cache
    grads = {"w": a.T @ dy}
    if layer.type == "real_dense":
        grads["b"] = dy.sum(axis=0)
    dx = dy @ w.T
    return dx.reshape(in_shape), grads


def _conv_slices(xp, kh, kw, stride, oh, ow):
    for ki in range(kh):
        for kj in range(kw):
            yield ki, kj, xp[:, :, ki:ki + stride * (oh - 1) + 1:stride,
                             kj:kj + stride * (ow - 1) + 1:stride]


def _conv_forward(i, layer, p, a):
    if a.ndim != 4 or a.shape[1] != layer.in_channels:
        raise ShapeError(
            f"layer {i} (binary_conv2d): expected (B, {layer.in_channels}, H, W), got {a.shape}"
        )
    b, _, h, w = a.shape
    s, pd = layer.stride, layer.pad
    oh = (h + 2 * pd - layer.kh) // s + 1
    ow = (w + 2 * pd - layer.kw) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"layer {i} (binary_conv2d): kernel larger than padded input {a.shape}")
    xp = np.pad(a, ((0, 0), (0, 0), (pd, pd), (pd, pd))) if pd else a
    wgt = p["w"]
    y = np.zeros((b, layer.out_channels, oh, ow))
    for ki, kj, xs in _conv_slices(xp, layer.kh, layer.kw, s, oh, ow):
        y += np.einsum("bchw,oc->bohw", xs, wgt[:, :, ki, kj])
    return y, (xp, a.shape, (oh, ow), wgt)


def _conv_backward(layer, cache, dy):
    xp, in_shape, (oh, ow), wgt = cache
    s, pd = layer.stride, layer.pad
    dw = np.zeros_like(wgt)
    dxp = np.zeros_like(xp)
    for ki, kj, xs in _conv_slices(xp, layer.kh, layer.kw, s, oh, ow):
        dw[:, :, ki, kj] = np.einsum("bohw,bchw->oc", dy, xs)
        dxp[:, :, ki:ki + s * (oh - 1) + 1:s, kj:kj + s * (ow - 1) + 1:s] += \
            np.einsum("bohw,oc->bchw", dy, wgt[:, :, ki, kj])
    dx = dxp[:, :, pd:pd + in_shape[2], pd:pd + in_shape[3]] if pd else dxp
    return dx, {"w": dw}


def _bn_axes(a, i, layer):
    if a.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif a.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"layer {i} (batch_norm): expected 2D or 4D input, got {a.shape}")
    if a.shape[1] != layer.features:
        raise ShapeError(
            f"layer {i} (batch_norm): expected {layer.features} features, got {a.shape[1]}"
        )
    return axes, bshape


def _bn_forward(i, layer, p, a, mode):
    axes, bshape = _bn_axes(a, i, layer)
    if mode == TRAIN:
        mu = a.mean(axis=axes)
        var = a.var(axis=axes)
        mom = layer.momentum
        p["running_mean"] = mom * p["running_mean"] + (1.0 - mom) * mu
        p["running_var"] = mom * p["running_var"] + (1.0 - mom) * var
    else:
        mu, var = p["running_mean"], p["running_var"]
    inv_std = 1.0 / np.sqrt(var + layer.epsilon)
    xhat = (a - mu.reshape(bshape)) * inv_std.reshape(bshape)
    y = p["gamma"].reshape(bshape) * xhat + p["beta"].reshape(bshape)
    m = a.size // a.shape[1]
    return y, (xhat, inv_std, axes, bshape, m, p["gamma"])


def _bn_backward(cache, dy):
    xhat, inv_std, axes, bshape, m, gamma = cache
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma.reshape(bshape)
    t1 = dxhat.sum(axis=axes, keepdims=True)
    t2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
    dx = inv_std.reshape(bshape) * (dxhat - t1 / m - xhat * t2 / m)
    return dx, {"gamma": dgamma, "beta": dbeta}


def _layer_forward(i, layer, p, a, mode):
    t = layer.type
    if t in ("binary_dense", "real_dense"):
        return _dense_forward(i, layer, p, a)
    if t == "binary_conv2d":
        return _conv_forward(i, layer, p, a)
    if t == "batch_norm":
        return _bn_forward(i, layer, p, a, mode)
    if t == "binary_activation":
        return sign_binarize(a), (a,)
    raise ValueError(f"layer {i}: unknown layer type {t!r}")


def forward(model: ModelSpec, params: list, x: np.ndarray, mode: str = TRAIN):
    """Run the layer graph; returns (logits, cache).

    Train mode normalizes with batch statistics and updates running stats;
    eval mode uses running statistics and leaves params untouched.
    """
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"unknown mode {mode!r}")
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite input")
    caches = []
    for i, (layer, p) in enumerate(zip(model.layers, params)):
        a, cache = _layer_forward(i, layer, p, a, mode)
        caches.append(cache)
    return a, ForwardCache(layer_caches=caches, logits=a, mode=mode)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - logsumexp
    b = logits.shape[0]
    loss = -log_p[np.arange(b), labels].mean()
    dz = np.exp(log_p)
    dz[np.arange(b), labels] -= 1.0
    return loss, dz / b


def backward(model: ModelSpec, cache: ForwardCache, y_label: np.ndarray):
    """Backprop from the softmax cross-entropy head through the cached pass.

    Returns (loss, LayerGradients). Binary weight entries carry the
    straight-through gradient at the binarized weights; magnitude-gated
    weight pseudo-gradients are composed by the caller via pseudo_gradient.
    """
    if cache.mode != TRAIN:
        raise ValueError("backward requires a train-mode forward cache")
    y_label = np.asarray(y_label)
    if y_label.shape[0] != cache.logits.shape[0]:
        raise ShapeError(
            f"label batch {y_label.shape[0]} != logit batch {cache.logits.shape[0]}"
        )
    loss, dz = softmax_xent(cache.logits, y_label)
    grads: list = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer, c = model.layers[i], cache.layer_caches[i]
        t = layer.type
        if t in ("binary_dense", "real_dense"):
            dz, grads[i] = _dense_backward(layer, c, dz)
        elif t == "binary_conv2d":
            dz, grads[i] = _conv_backward(layer, c, dz)
        elif t == "batch_norm":
            dz, grads[i] = _bn_backward(c, dz)
        elif t == "binary_activation":
            dz, grads[i] = pseudo_gradient(layer.pseudo_grad, dz, c[0]), {}
    return loss, LayerGradients(per_layer=grads)


# ---------------------------------------------------------------------------
# Whole-dataset helpers
# ---------------------------------------------------------------------------

def batchnorm_refresh(model: ModelSpec, params: list, x: np.ndarray,
                      batch_size: int = 256) -> None:
    """Recompute batch-norm running stats over a full dataset, weights frozen.

    Streams canonical-order batches through train-mode forwards, accumulates
    grand-total first/second moments of every batch-norm layer's input, and
    overwrites running_mean/running_var with the aggregate. Idempotent for a
    fixed dataset; nothing but running stats changes.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    bn_idx = [i for i, l in enumerate(model.layers) if l.type == "batch_norm"]
    sums = {i: np.zeros(model.layers[i].features) for i in bn_idx}
    sumsqs = {i: np.zeros(model.layers[i].features) for i in bn_idx}
    counts = {i: 0 for i in bn_idx}
    for lo in range(0, n, batch_size):
        a = x[lo:lo + batch_size]
        for i, layer in enumerate(model.layers):
            if i in sums:
                axes, _ = _bn_axes(a, i, layer)
                sums[i] += a.sum(axis=axes)
                sumsqs[i] += (a * a).sum(axis=axes)
                counts[i] += a.size // a.shape[1]
            a, _ = _layer_forward(i, layer, params[i], a, TRAIN)
    for i in bn_idx:
        mean = sums[i] / counts[i]
        var = sumsqs[i] / counts[i] - mean * mean
        params[i]["running_mean"] = mean
        params[i]["running_var"] = np.maximum(var, 0.0)


def evaluate(model: ModelSpec, params: list, x: np.ndarray, labels: np.ndarray,
             batch_size: int = 512) -> tuple[float, float]:
    """Eval-mode (accuracy, mean loss) over a labeled set."""
    n = x.shape[0]
    correct = 0
    loss_sum = 0.0
    for lo in range(0, n, batch_size):
        xb, yb = x[lo:lo + batch_size], labels[lo:lo + batch_size]
        logits, _ = forward(model, params, xb, EVAL)
        correct += int((logits.argmax(axis=1) == yb).sum())
        loss, _ = softmax_xent(logits, yb)
        loss_sum += loss * xb.shape[0]
    return correct / n, loss_sum / n
