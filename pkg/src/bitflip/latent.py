"""Latent-weight training: real-valued shadow weights whose signs are the
binary weights, stepped by SGD / momentum / Adam with optional clipping.

Also home to the scale-invariance verifiers: under SGD with a
magnitude-independent pseudo-gradient and no clipping, multiplying the
learning rate and the initial latent weights by the same power of two leaves
the binary weight trajectory bit-for-bit unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .nn import IDENTITY_STE, sign_binarize

GLOROT = "glorot"
GLOROT_SCALED = "glorot_scaled"

SGD = "sgd"
MOMENTUM = "momentum"
ADAM = "adam"
VARIANTS = (SGD, MOMENTUM, ADAM)


@dataclass
class LatentState:
    """Per-layer latent weights plus optimizer slots (filled lazily)."""

    w: np.ndarray
    slots: dict = field(default_factory=dict)
    clip: Optional[float] = None


@dataclass
class LatentOptimizerConfig:
    variant: str = ADAM
    lr: float = 1e-3
    beta: float = 0.9          # momentum variant
    beta1: float = 0.9         # adam
    beta2: float = 0.999
    epsilon: float = 1e-7
    clip: Optional[float] = None
    pseudo_grad: str = IDENTITY_STE
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown optimizer variant {self.variant!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not (0.0 <= self.beta < 1.0 and 0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("momentum/adam betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip must be > 0 when set")
        if self.pseudo_grad not in nn.PSEUDO_GRADIENT_KINDS:
            raise ValueError(f"unknown pseudo-gradient kind {self.pseudo_grad!r}")


def latent_init(shape: tuple, seed: int, scheme: str = GLOROT,
                scale: float = 1.0) -> LatentState:
    """Glorot-uniform latent weights, optionally rescaled by a constant.

    Deterministic for a given seed; scale=1 under glorot_scaled is
    bit-identical to plain glorot.
    """
    if scheme not in (GLOROT, GLOROT_SCALED):
        raise ValueError(f"unknown init scheme {scheme!r}")
    if scheme == GLOROT:
        scale = 1.0
    if not scale > 0:
        raise ValueError("init scale must be > 0")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    w = nn.glorot_uniform(tuple(shape), rng)
    if scale != 1.0:
        w = w * scale
    return LatentState(w=w)


def binary_weights(state: LatentState) -> np.ndarray:
    """The forward-pass weights: elementwise sign of the latent weights."""
    return sign_binarize(state.w)


def latent_step(state: LatentState, cfg: LatentOptimizerConfig, g: np.ndarray,
                lr: Optional[float] = None) -> LatentState:
    """One descent step on the latent weights; mutates and returns `state`.

    `lr` overrides cfg.lr (schedules pass the current value). The state is
    untouched if validation fails.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.w.shape:
        raise nn.ShapeError(f"gradient shape {g.shape} != latent shape {state.w.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient")
    alpha = cfg.lr if lr is None else lr
    if cfg.weight_decay:
        g = g + cfg.weight_decay * state.w

    if cfg.variant == SGD:
        state.w = state.w - alpha * g
    elif cfg.variant == MOMENTUM:
        v = state.slots.setdefault("v", np.zeros_like(state.w))
        v = cfg.beta * v + g
        state.slots["v"] = v
        state.w = state.w - alpha * v
    elif cfg.variant == ADAM:
        m = state.slots.setdefault("m", np.zeros_like(state.w))
        v = state.slots.setdefault("v", np.zeros_like(state.w))
        t = state.slots.get("t", 0) + 1
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        state.slots.update(m=m, v=v, t=t)
        mhat = m / (1.0 - cfg.beta1 ** t)
        vhat = v / (1.0 - cfg.beta2 ** t)
        state.w = state.w - alpha * mhat / (np.sqrt(vhat) + cfg.epsilon)
    else:
        raise ValueError(f"unknown optimizer variant {cfg.variant!r}")

    clip = cfg.clip if cfg.clip is not None else state.clip
    if clip is not None:
        np.clip(state.w, -clip, clip, out=state.w)
    state.clip = clip
    return state


class RealParamAdam:
    """Adam over a model's trainable real tensors (batch-norm scale/shift,
    real dense weights/biases)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-7):
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: list, grads: nn.LayerGradients, model: nn.ModelSpec,
             lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, name, g in grads.real_items(model):
            key = (i, name)
            m = self.m.get(key)
            if m is None:
                m = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            v = self.v[key]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self.m[key], self.v[key] = m, v
            mhat = m / (1.0 - b1 ** self.t)
            vhat = v / (1.0 - b2 ** self.t)
            params[i][name] = params[i][name] - lr * mhat / (np.sqrt(vhat) + self.epsilon)


# ---------------------------------------------------------------------------
# Scale-invariance verification
# ---------------------------------------------------------------------------

def _is_power_of_two(c: float) -> bool:
    if not (c > 0 and math.isfinite(c)):
        return False
    return math.frexp(c)[0] == 0.5


def _batch_index_stream(n: int, batch_size: int, steps: int, seed: int):
    """Deterministic sequence of batch index arrays, reshuffled each pass."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    out = []
    while len(out) < steps:
        perm = rng.permutation(n)
        for lo in range(0, n, batch_size):
            out.append(perm[lo:lo + batch_size])
            if len(out) == steps:
                break
    return out


class _SgdRun:
    """One SGD latent-weight training run over a fixed batch stream."""

    def __init__(self, model, x, y, seed, lr, init_scale=1.0, lr_scales=None,
                 init_scales=None, bn_lr=1e-2):
        self.model = model
        self.x, self.y = x, y
        self.params = nn.build_params(model, seed)
        self.bin_idx = model.binary_layer_indices()
        self.latents = {}
        for i in self.bin_idx:
            st = latent_init(self.params[i]["w"].shape, seed=child_seed(seed, i))
            if init_scale != 1.0:
                st.w = st.w * init_scale
            if init_scales is not None:
                st.w = st.w * init_scales[i]
            self.latents[i] = st
        self.lr = lr
        self.lr_scales = lr_scales
        self.real_opt = RealParamAdam()
        self.bn_lr = bn_lr

    def step(self, idx) -> None:
        for i in self.bin_idx:
            self.params[i]["w"] = sign_binarize(self.latents[i].w)
        _, cache = nn.forward(self.model, self.params, self.x[idx], nn.TRAIN)
        _, grads = nn.backward(self.model, cache, self.y[idx])
        for i in self.bin_idx:
            g = grads.per_layer[i]["w"]          # identity_ste: pass-through
            st = self.latents[i]
            if self.lr_scales is None:
                st.w = st.w - self.lr * g
            else:
                st.w = st.w - (self.lr * self.lr_scales[i]) * g
        self.real_opt.step(self.params, grads, self.model, self.bn_lr)

    def binary_snapshot(self):
        return [sign_binarize(self.latents[i].w) for i in self.bin_idx]


def child_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([int(seed), *key]).generate_state(1)[0])


def _compare_runs(run_a: _SgdRun, run_b: _SgdRun, batches) -> dict:
    first_div = None
    for t, idx in enumerate(batches):
        run_a.step(idx)
        run_b.step(idx)
        if first_div is None:
            for wa, wb in zip(run_a.binary_snapshot(), run_b.binary_snapshot()):
                if not np.array_equal(wa, wb):
                    first_div = t
                    break
    return {"identical": first_div is None,
            "first_divergence_step": first_div,
            "steps": len(batches)}


def _check_preconditions(cfg: LatentOptimizerConfig) -> None:
    if cfg.variant != SGD:
        raise ValueError("scale invariance requires the sgd variant")
    if cfg.clip is not None:
        raise ValueError("scale invariance requires clipping disabled")
    if cfg.pseudo_grad != IDENTITY_STE:
        raise ValueError("scale invariance requires the identity_ste pseudo-gradient")


def verify_scale_invariance(model: nn.ModelSpec, cfg: LatentOptimizerConfig,
                            scale: float, steps: int, x: np.ndarray, y: np.ndarray,
                            seed: int, batch_size: int = 64) -> dict:
    """Train twice, from (lr, w0) and (scale*lr, scale*w0), on an identical
    batch stream; report whether the binary weight trajectories match
    bit-for-bit at every step.

    `scale` must be a power of two so the rescaled run's floating-point
    trajectory is an exact multiple of the baseline's.
    """
    _check_preconditions(cfg)
    if not _is_power_of_two(scale):
        raise ValueError("scale must be a positive power of two")
    model.validate(input_shape=x.shape[1:], require_binary=True)
    batches = _batch_index_stream(x.shape[0], batch_size, steps, seed)
    run_a = _SgdRun(model, x, y, seed, lr=cfg.lr)
    run_b = _SgdRun(model, x, y, seed, lr=cfg.lr * scale, init_scale=scale)
    report = _compare_runs(run_a, run_b, batches)
    report["C"] = scale
    return report


def per_weight_rescale_demo(model: nn.ModelSpec, cfg: LatentOptimizerConfig,
                            steps: int, x: np.ndarray, y: np.ndarray, seed: int,
                            batch_size: int = 64, exponent_range: int = 2,
                            scale_init: bool = True) -> dict:
    """Per-weight variant: every weight gets its own power-of-two factor
    applied to both its learning rate and its initial value (or, with
    scale_init=False, to the learning rate only, which is expected to
    diverge on any task with gradient signal)."""
    _check_preconditions(cfg)
    model.validate(input_shape=x.shape[1:], require_binary=True)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    scales = {}
    for i in model.binary_layer_indices():
        shape = nn.binary_weight_shape(model.layers[i])
        exps = rng.integers(-exponent_range, exponent_range + 1, size=shape)
        scales[i] = np.ldexp(1.0, exps)
    batches = _batch_index_stream(x.shape[0], batch_size, steps, seed)
    run_a = _SgdRun(model, x, y, seed, lr=cfg.lr)
    run_b = _SgdRun(model, x, y, seed, lr=cfg.lr, lr_scales=scales,
                    init_scales=scales if scale_init else None)
    report = _compare_runs(run_a, run_b, batches)
    report["scale_init"] = scale_init
    return report
