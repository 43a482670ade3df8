"""Bit-packed {-1,+1} tensors, XNOR-popcount kernels, the versioned
checkpoint format, and a micro-benchmark against the float reference.

Packing convention (frozen in checkpoint version 1): 1 bit per element in
64-bit words, bit=1 encodes +1, LSB-first along the packed axis, zero-padded
to a word boundary. The +-1 dot product is then n - 2*popcount(a XOR b);
zero pad bits cancel in the XOR, so padding never affects results.
"""
from __future__ import annotations

import os
import platform
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from . import nn

MAGIC = b"BNN1"
VERSION = 1

_KIND_EMPTY = 0
_KIND_PACKED = 1
_KIND_REAL = 2


# ---------------------------------------------------------------------------
# Packed tensors
# ---------------------------------------------------------------------------

@dataclass
class PackedBinaryTensor:
    logical_shape: tuple
    axis: int
    words: np.ndarray        # (rows, n_words) uint64, rows = other dims flattened

    @property
    def n(self) -> int:
        return self.logical_shape[self.axis]

    @property
    def pad_len(self) -> int:
        return self.words.shape[1] * 64 - self.n


def _pack_bit_rows(bits: np.ndarray) -> np.ndarray:
    """bool/uint8 (rows, n) -> uint64 (rows, ceil(n/64)) words, LSB-first,
    zero pad bits."""
    rows, n = bits.shape
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    pad = (-n) % 64
    if pad:
        bits = np.concatenate([bits, np.zeros((rows, pad), np.uint8)], axis=1)
    words = np.packbits(bits, axis=1, bitorder="little")
    return np.ascontiguousarray(words).view(np.uint64)


def pack(x: np.ndarray, axis: int = -1) -> PackedBinaryTensor:
    """Pack a {-1,+1} tensor along one axis, 1 bit per element."""
    x = np.asarray(x, dtype=np.float64)
    bad = np.abs(x) != 1.0
    if bad.any():
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ValueError(f"element at {idx} is not +-1: {x[idx]!r}")
    axis = axis % x.ndim
    moved = np.moveaxis(x, axis, -1)
    n = moved.shape[-1]
    words = _pack_bit_rows((moved > 0).reshape(-1, n))
    return PackedBinaryTensor(logical_shape=x.shape, axis=axis, words=words)


def unpack(p: PackedBinaryTensor) -> np.ndarray:
    """Inverse of pack(): the original {-1,+1} float64 tensor."""
    bits = np.unpackbits(p.words.view(np.uint8), axis=1, bitorder="little")[:, :p.n]
    moved_shape = tuple(np.delete(p.logical_shape, p.axis)) + (p.n,)
    x = np.where(bits.astype(bool), 1.0, -1.0).reshape(moved_shape)
    return np.moveaxis(x, -1, p.axis)


def xnor_dot(a: PackedBinaryTensor, b: PackedBinaryTensor) -> int:
    """Exact +-1 dot product of two packed vectors: n - 2*popcount(a XOR b)."""
    if a.n != b.n or a.axis != b.axis:
        raise ValueError(
            f"packed operands disagree: lengths {a.n}/{b.n}, axes {a.axis}/{b.axis}"
        )
    if a.words.shape[0] != 1 or b.words.shape[0] != 1:
        raise ValueError("xnor_dot expects packed vectors")
    diff = int(np.bitwise_count(a.words ^ b.words).sum())
    return a.n - 2 * diff


_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


@njit(cache=True)
def _xnor_matmul_kernel(xw, wkm, n, out):
    # xw: (B, nw) packed rows; wkm: (nw, O) word-major packed columns
    b, nw = xw.shape
    o = wkm.shape[1]
    for i in range(b):
        for j in range(o):
            out[i, j] = 0
        for k in range(nw):
            xv = xw[i, k]
            for j in range(o):
                v = xv ^ wkm[k, j]
                v -= (v >> np.uint64(1)) & _M1
                v = (v & _M2) + ((v >> np.uint64(2)) & _M2)
                v = (v + (v >> np.uint64(4))) & _M4
                out[i, j] += np.int64((v * _H01) >> np.uint64(56))
        for j in range(o):
            out[i, j] = n - 2 * out[i, j]


def xnor_matmul(x_packed: PackedBinaryTensor, w_kmajor: np.ndarray, n: int,
                n_out: int) -> np.ndarray:
    """Batched exact +-1 matmul: rows of x against packed weight columns."""
    out = np.empty((x_packed.words.shape[0], n_out), dtype=np.int64)
    _xnor_matmul_kernel(x_packed.words, w_kmajor, n, out)
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Model graph plus per-layer payloads.

    Binary weight layers hold either a PackedBinaryTensor (deployment form)
    or a real-valued array (training form, preserving latent weights);
    everything else is named float64 arrays.
    """

    model: nn.ModelSpec
    payloads: list          # aligned with model.layers: dict name -> array | PackedBinaryTensor

    def eval_params(self) -> list[dict]:
        """Float parameter dicts ready for eval-mode forward: packed weights
        unpacked, real-valued binary slots sign-binarized."""
        params = []
        for layer, payload in zip(self.model.layers, self.payloads):
            p = {}
            for name, val in payload.items():
                if isinstance(val, PackedBinaryTensor):
                    w = unpack(val)
                    if w.shape != nn.binary_weight_shape(layer):
                        w = w.reshape(nn.binary_weight_shape(layer))
                    p[name] = w
                elif layer.type in nn.BINARY_WEIGHT_TYPES and name == "w":
                    p[name] = nn.sign_binarize(val)
                else:
                    p[name] = np.copy(val)
            params.append(p)
        return params

    def latent_weights(self) -> dict[int, np.ndarray]:
        """Real-valued binary-layer weights, for latent-weight evaluation."""
        out = {}
        for i in self.model.binary_layer_indices():
            val = self.payloads[i].get("w")
            if not isinstance(val, np.ndarray):
                raise ValueError(
                    f"layer {i}: checkpoint stores packed signs, no latent weights"
                )
            out[i] = np.copy(val)
        return out

    def packed(self) -> "Checkpoint":
        """Deployment form: every binary weight binarized and bit-packed."""
        payloads = []
        for layer, payload in zip(self.model.layers, self.payloads):
            if layer.type in nn.BINARY_WEIGHT_TYPES:
                w = payload["w"]
                if not isinstance(w, PackedBinaryTensor):
                    w = nn.sign_binarize(w)
                    if layer.type == "binary_conv2d":
                        w = w.reshape(w.shape[0], -1)   # contraction dims flattened
                    w = pack(w, axis=0 if layer.type == "binary_dense" else 1)
                payloads.append({"w": w})
            else:
                payloads.append({k: np.copy(v) for k, v in payload.items()})
        return Checkpoint(model=self.model, payloads=payloads)


def checkpoint_from_params(model: nn.ModelSpec, params: list,
                           binary_weights: dict[int, np.ndarray]) -> Checkpoint:
    """Snapshot training state. binary_weights maps binary layer index to the
    weights to persist (latent reals for latent training, signs for bop)."""
    payloads = []
    for i, (layer, p) in enumerate(zip(model.layers, params)):
        if layer.type in nn.BINARY_WEIGHT_TYPES:
            payloads.append({"w": np.copy(binary_weights[i])})
        else:
            payloads.append({k: np.copy(v) for k, v in p.items()})
    return Checkpoint(model=model, payloads=payloads)


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    nm = name.encode()
    fh.write(struct.pack("<B", len(nm)))
    fh.write(nm)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec_bytes = ckpt.model.to_json().encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(spec_bytes)))
        fh.write(spec_bytes)
        for payload in ckpt.payloads:
            body = _encode_payload(payload)
            fh.write(struct.pack("<BI", body[0], len(body[1])))
            fh.write(body[1])


def _encode_payload(payload: dict) -> tuple[int, bytes]:
    import io
    if not payload:
        return _KIND_EMPTY, b""
    vals = list(payload.values())
    if len(vals) == 1 and isinstance(vals[0], PackedBinaryTensor):
        p = vals[0]
        buf = io.BytesIO()
        buf.write(struct.pack("<B", len(p.logical_shape)))
        buf.write(struct.pack(f"<{len(p.logical_shape)}I", *p.logical_shape))
        buf.write(struct.pack("<B", p.axis))
        buf.write(np.ascontiguousarray(p.words, dtype="<u8").tobytes())
        return _KIND_PACKED, buf.getvalue()
    buf = io.BytesIO()
    buf.write(struct.pack("<H", len(payload)))
    for name, arr in payload.items():
        _write_tensor(buf, name, np.asarray(arr))
    return _KIND_REAL, buf.getvalue()


def _read_struct(fh, fmt: str, what: str):
    size = struct.calcsize(fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise ValueError(f"truncated checkpoint while reading {what}")
    return struct.unpack(fmt, buf)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} (expected {MAGIC!r})")
        (version,) = _read_struct(fh, "<H", "version")
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (spec_len,) = _read_struct(fh, "<I", "spec length")
        spec_bytes = fh.read(spec_len)
        if len(spec_bytes) != spec_len:
            raise ValueError("truncated checkpoint while reading model spec")
        model = nn.ModelSpec.from_json(spec_bytes.decode())
        payloads = []
        for i in range(len(model.layers)):
            kind, length = _read_struct(fh, "<BI", f"layer {i} payload header")
            body = fh.read(length)
            if len(body) != length:
                raise ValueError(f"truncated checkpoint in layer {i} payload")
            payloads.append(_decode_payload(kind, body, i))
    return Checkpoint(model=model, payloads=payloads)


def _decode_payload(kind: int, body: bytes, layer_idx: int) -> dict:
    import io
    fh = io.BytesIO(body)
    if kind == _KIND_EMPTY:
        return {}
    if kind == _KIND_PACKED:
        (ndim,) = _read_struct(fh, "<B", "packed ndim")
        shape = _read_struct(fh, f"<{ndim}I", "packed shape")
        (axis,) = _read_struct(fh, "<B", "packed axis")
        n = shape[axis]
        rows = int(np.prod(shape)) // n
        n_words = (n + 63) // 64
        raw = fh.read(rows * n_words * 8)
        if len(raw) != rows * n_words * 8:
            raise ValueError(f"truncated packed payload in layer {layer_idx}")
        words = np.frombuffer(raw, dtype="<u8").reshape(rows, n_words).astype(np.uint64)
        return {"w": PackedBinaryTensor(logical_shape=tuple(shape), axis=axis, words=words)}
    if kind == _KIND_REAL:
        (count,) = _read_struct(fh, "<H", "tensor count")
        out = {}
        for _ in range(count):
            (name_len,) = _read_struct(fh, "<B", "tensor name length")
            name = fh.read(name_len).decode()
            (ndim,) = _read_struct(fh, "<B", "tensor ndim")
            shape = _read_struct(fh, f"<{ndim}I", "tensor shape") if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            raw = fh.read(size * 8)
            if len(raw) != size * 8:
                raise ValueError(f"truncated tensor {name!r} in layer {layer_idx}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        return out
    raise ValueError(f"unknown payload kind {kind} in layer {layer_idx}")


# ---------------------------------------------------------------------------
# Packed evaluation
# ---------------------------------------------------------------------------

class PackedModel:
    """Eval-mode forward where binary dense layers on sign-binarized inputs
    run through the XNOR-popcount kernel; all other layers (and binary convs,
    whose zero padding has no +-1 encoding) use the exact float path."""

    def __init__(self, ckpt: Checkpoint):
        self.model = ckpt.model
        self.params = ckpt.eval_params()
        self.kernels: dict[int, tuple[np.ndarray, int, int]] = {}
        prev_binary = False
        for i, layer in enumerate(self.model.layers):
            if layer.type == "binary_dense" and prev_binary:
                wp = pack(self.params[i]["w"], axis=0)   # rows = out, bits over in
                wkm = np.ascontiguousarray(wp.words.T)
                self.kernels[i] = (wkm, layer.in_features, layer.out_features)
            prev_binary = layer.type == "binary_activation"

    def forward(self, x: np.ndarray) -> np.ndarray:
        a = np.asarray(x, dtype=np.float64)
        layers = self.model.layers
        i = 0
        while i < len(layers):
            layer = layers[i]
            # fused route: sign-activation feeding a packed dense layer packs
            # the sign bits directly (a >= 0 <=> sign is +1), skipping the
            # {-1,+1} float intermediate
            if layer.type == "binary_activation" and (i + 1) in self.kernels:
                wkm, n_in, n_out = self.kernels[i + 1]
                flat = a.reshape(a.shape[0], -1)
                if flat.shape[1] != n_in:
                    raise nn.ShapeError(
                        f"layer {i + 1} (binary_dense): expected (B, {n_in}), got {a.shape}"
                    )
                out = np.empty((flat.shape[0], n_out), dtype=np.int64)
                _xnor_matmul_kernel(_pack_bit_rows(flat >= 0), wkm, n_in, out)
                a = out.astype(np.float64)
                i += 2
                continue
            a, _ = nn._layer_forward(i, layer, self.params[i], a, nn.EVAL)
            i += 1
        return a


def packed_forward(ckpt: Checkpoint, x: np.ndarray) -> np.ndarray:
    """Eval-mode logits from a checkpoint via the packed kernels."""
    return PackedModel(ckpt).forward(x)


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

def bench(ckpt: Checkpoint, batch: int = 64, repeats: int = 100,
          input_shape: tuple | None = None, seed: int = 0) -> dict:
    """Median per-sample latency of the packed forward vs the float64
    reference forward, on the same random input batch."""
    model = ckpt.model
    if input_shape is None:
        first = model.layers[0]
        if first.type in ("binary_dense", "real_dense"):
            input_shape = (first.in_features,)
        elif first.type == "binary_conv2d":
            raise ValueError("conv models need an explicit input_shape")
        else:  # activation/norm first: walk until a weight layer
            for l in model.layers:
                if l.type in ("binary_dense", "real_dense"):
                    input_shape = (l.in_features,)
                    break
            else:
                raise ValueError("cannot infer input shape; pass input_shape")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    x = rng.uniform(-1.0, 1.0, size=(batch,) + tuple(input_shape))

    pm = PackedModel(ckpt)
    ref_params = ckpt.eval_params()

    packed_logits = pm.forward(x)                      # also triggers the JIT
    ref_logits, _ = nn.forward(model, ref_params, x, nn.EVAL)
    agreement = float((packed_logits.argmax(1) == ref_logits.argmax(1)).mean())

    def timeit(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return float(np.median(times)) / batch * 1e9

    packed_ns = timeit(lambda: pm.forward(x))
    reference_ns = timeit(lambda: nn.forward(model, ref_params, x, nn.EVAL))
    return {
        "packed_ns_per_sample": packed_ns,
        "reference_ns_per_sample": reference_ns,
        "ratio": reference_ns / packed_ns,
        "argmax_agreement": agreement,
        "batch": batch,
        "repeats": repeats,
        "machine": f"{platform.machine()}, {os.cpu_count()} cpus",
    }
