"""Dataset ingestion and batching.

MNIST arrives in big-endian IDX files, CIFAR-10 in 3073-byte binary records;
both are scaled to [-1, +1]. Synthetic generators provide fast property-test
substrates, and a deterministic digit-style corpus can be written in genuine
IDX format for desk-scale runs when the real archives are absent.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

TRAIN = "train"
TEST = "test"

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels


@dataclass
class DatasetHandle:
    split: str
    x: np.ndarray          # (N, ...) float64 in [-1, +1]
    y: np.ndarray          # (N,) int64 class indices
    num_classes: int

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class AugmentSpec:
    pad: int = 4
    crop: int = 32
    hflip: float = 0.5


def _scale_u8(pixels: np.ndarray) -> np.ndarray:
    # affine map 0->-1, 255->+1
    return pixels.astype(np.float64) / 127.5 - 1.0


# ---------------------------------------------------------------------------
# MNIST (IDX format)
# ---------------------------------------------------------------------------

def _open_maybe_gz(path: Path):
    gz = path.with_name(path.name + ".gz")
    if path.exists():
        return open(path, "rb")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise FileNotFoundError(f"missing dataset file {path} (or {gz.name})")


def _read_exact(fh, count: int, offset: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise ValueError(f"truncated {what} at offset {offset}: wanted {count} bytes, got {len(buf)}")
    return buf


def read_idx_images(path) -> np.ndarray:
    path = Path(path)
    with _open_maybe_gz(path) as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, 0, "IDX header"))
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"bad IDX image magic {magic:#010x} at offset 0 in {path.name}")
        raw = _read_exact(fh, n * rows * cols, 16, "IDX image data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    path = Path(path)
    with _open_maybe_gz(path) as fh:
        magic, n = struct.unpack(">II", _read_exact(fh, 8, 0, "IDX header"))
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"bad IDX label magic {magic:#010x} at offset 0 in {path.name}")
        raw = _read_exact(fh, n, 8, "IDX label data")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


MNIST_FILES = {
    (TRAIN, "images"): "train-images-idx3-ubyte",
    (TRAIN, "labels"): "train-labels-idx1-ubyte",
    (TEST, "images"): "t10k-images-idx3-ubyte",
    (TEST, "labels"): "t10k-labels-idx1-ubyte",
}


def load_mnist(data_dir) -> tuple[DatasetHandle, DatasetHandle]:
    """IDX-format image/label pairs -> (train, test), images (N,1,28,28)."""
    data_dir = Path(data_dir)
    handles = []
    for split in (TRAIN, TEST):
        images = read_idx_images(data_dir / MNIST_FILES[(split, "images")])
        labels = read_idx_labels(data_dir / MNIST_FILES[(split, "labels")])
        if images.shape[0] != labels.shape[0]:
            raise ValueError(
                f"{split}: {images.shape[0]} images but {labels.shape[0]} labels"
            )
        _check_labels(labels, 10, split)
        x = _scale_u8(images)[:, None, :, :]
        handles.append(DatasetHandle(split=split, x=x, y=labels, num_classes=10))
    return handles[0], handles[1]


def _check_labels(labels: np.ndarray, num_classes: int, what: str) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"{what}: label {int(labels.max())} outside [0, {num_classes})")


# ---------------------------------------------------------------------------
# CIFAR-10 (binary batches)
# ---------------------------------------------------------------------------

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        raise ValueError(
            f"{path.name}: size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    recs = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = recs[:, 0].astype(np.int64)
    images = recs[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(data_dir) -> tuple[DatasetHandle, DatasetHandle]:
    """CIFAR-10 binary batches -> (train, test), images (N,3,32,32)."""
    data_dir = Path(data_dir)
    handles = []
    for split, files in ((TRAIN, CIFAR_TRAIN_FILES), (TEST, CIFAR_TEST_FILES)):
        imgs, labs = [], []
        for name in files:
            path = data_dir / name
            if not path.exists():
                raise FileNotFoundError(f"missing dataset file {path}")
            i, l = _read_cifar_file(path)
            imgs.append(i)
            labs.append(l)
        x = _scale_u8(np.concatenate(imgs))
        y = np.concatenate(labs)
        _check_labels(y, 10, split)
        handles.append(DatasetHandle(split=split, x=x, y=y, num_classes=10))
    return handles[0], handles[1]


# ---------------------------------------------------------------------------
# Augmentation (train-time only)
# ---------------------------------------------------------------------------

def hflip(batch: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Horizontally flip the samples selected by `mask` (an involution for a
    fixed mask)."""
    out = batch.copy()
    out[mask] = out[mask][..., ::-1]
    return out


def augment(batch: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, random-crop back to `spec.crop`, then random horizontal flip.

    Padding fills with 0 in the scaled space (mid-gray). Test-time paths
    should not call this at all.
    """
    b, c, h, w = batch.shape
    if spec.crop > h + 2 * spec.pad or spec.crop > w + 2 * spec.pad:
        raise ValueError(f"crop {spec.crop} exceeds padded size")
    out = batch
    if spec.pad > 0 or spec.crop != h:
        p = spec.pad
        padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)))
        max_off = padded.shape[2] - spec.crop, padded.shape[3] - spec.crop
        oy = rng.integers(0, max_off[0] + 1, size=b)
        ox = rng.integers(0, max_off[1] + 1, size=b)
        out = np.empty((b, c, spec.crop, spec.crop), dtype=batch.dtype)
        for k in range(b):
            out[k] = padded[k, :, oy[k]:oy[k] + spec.crop, ox[k]:ox[k] + spec.crop]
    if spec.hflip > 0:
        mask = rng.random(b) < spec.hflip
        out = hflip(out, mask)
    return out


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def shuffled_batches(handle: DatasetHandle, batch_size: int,
                     rng: Optional[np.random.Generator] = None):
    """Yield (x, y) minibatches; a seeded Generator reproduces the exact same
    batch sequence, which scale-invariance verification relies on."""
    n = len(handle)
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    for lo in range(0, n, batch_size):
        sel = idx[lo:lo + batch_size]
        yield handle.x[sel], handle.y[sel]


# ---------------------------------------------------------------------------
# Synthetic tasks (property-test substrate)
# ---------------------------------------------------------------------------

LINEARLY_SEPARABLE = "linearly_separable"
XOR = "xor"
GAUSSIAN_BLOBS = "gaussian_blobs"


def synthetic_task(kind: str, n: int, seed: int) -> DatasetHandle:
    """Small deterministic labeled datasets with features in [-1, 1]."""
    if n <= 0:
        raise ValueError("n must be > 0")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    if kind == LINEARLY_SEPARABLE:
        x = rng.uniform(-1.0, 1.0, size=(n, 4))
        w = np.array([1.0, -2.0, 0.5, 1.5])
        margin = x @ w
        # resample points too close to the boundary so the task is cleanly separable
        close = np.abs(margin) < 0.3
        while close.any():
            x[close] = rng.uniform(-1.0, 1.0, size=(int(close.sum()), 4))
            margin = x @ w
            close = np.abs(margin) < 0.3
        y = (margin > 0).astype(np.int64)
        return DatasetHandle(TRAIN, x, y, num_classes=2)
    if kind == XOR:
        centers = np.array([[-0.6, -0.6], [-0.6, 0.6], [0.6, -0.6], [0.6, 0.6]])
        which = rng.integers(0, 4, size=n)
        x = centers[which] + rng.normal(0.0, 0.12, size=(n, 2))
        x = np.clip(x, -1.0, 1.0)
        y = ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(np.int64)
        return DatasetHandle(TRAIN, x, y, num_classes=2)
    if kind == GAUSSIAN_BLOBS:
        k = 4
        centers = rng.uniform(-0.8, 0.8, size=(k, 6))
        y = rng.integers(0, k, size=n)
        x = centers[y] + rng.normal(0.0, 0.08, size=(n, 6))
        x = np.clip(x, -1.0, 1.0)
        return DatasetHandle(TRAIN, x, y.astype(np.int64), num_classes=k)
    raise ValueError(f"unknown synthetic task {kind!r}")


# ---------------------------------------------------------------------------
# Synthetic desk-scale corpora in the real on-disk formats
# ---------------------------------------------------------------------------

def _digit_prototypes(rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """Ten smooth, well-separated grayscale patterns."""
    protos = np.empty((10, size, size))
    for c in range(10):
        coarse = rng.normal(0.0, 1.0, size=(7, 7))
        img = np.kron(coarse, np.ones((4, 4)))
        # cheap blur to keep patterns smooth under small shifts
        for _ in range(2):
            img = (img + np.roll(img, 1, 0) + np.roll(img, -1, 0)
                   + np.roll(img, 1, 1) + np.roll(img, -1, 1)) / 5.0
        img = (img - img.min()) / (img.max() - img.min())
        protos[c] = img
    return protos


def make_synthetic_digits(n: int, seed: int, noise: float = 0.25,
                          max_shift: int = 2,
                          protos: Optional[np.ndarray] = None
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Byte images (n, 28, 28) + labels for a digit-style 10-class task:
    shifted, noisy class prototypes. Pass the same `protos` to draw multiple
    splits of one task."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    if protos is None:
        protos = _digit_prototypes(rng)
    labels = rng.integers(0, 10, size=n)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    imgs = np.empty((n, 28, 28))
    for i in range(n):
        img = np.roll(protos[labels[i]], (shifts[i, 0], shifts[i, 1]), axis=(0, 1))
        imgs[i] = img + rng.normal(0.0, noise, size=(28, 28))
    imgs = np.clip(imgs, 0.0, 1.0)
    return (imgs * 255).round().astype(np.uint8), labels.astype(np.uint8)


def write_synthetic_mnist(data_dir, n_train: int = 8000, n_test: int = 2000,
                          seed: int = 7, noise: float = 0.25,
                          max_shift: int = 2) -> None:
    """Write a deterministic synthetic corpus in genuine IDX format, laid out
    like the MNIST archive so load_mnist() consumes it unchanged. Train and
    test share class prototypes; sample noise and shifts differ."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    protos = _digit_prototypes(np.random.default_rng(np.random.SeedSequence([int(seed), 0])))
    train_x, train_y = make_synthetic_digits(n_train, seed=seed + 1, noise=noise,
                                             max_shift=max_shift, protos=protos)
    test_x, test_y = make_synthetic_digits(n_test, seed=seed + 2, noise=noise,
                                           max_shift=max_shift, protos=protos)
    write_idx_images(data_dir / MNIST_FILES[(TRAIN, "images")], train_x)
    write_idx_labels(data_dir / MNIST_FILES[(TRAIN, "labels")], train_y)
    write_idx_images(data_dir / MNIST_FILES[(TEST, "images")], test_x)
    write_idx_labels(data_dir / MNIST_FILES[(TEST, "labels")], test_y)


def write_synthetic_cifar10(data_dir, n_per_batch: int = 200, seed: int = 11) -> None:
    """Small CIFAR-10-format binary batches (5 train + 1 test) with blob-style
    class structure; exercises the real record layout."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    centers = rng.integers(40, 216, size=(10, 3))
    for name in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES:
        labels = rng.integers(0, 10, size=n_per_batch).astype(np.uint8)
        base = centers[labels][:, :, None, None]
        pix = base + rng.normal(0.0, 30.0, size=(n_per_batch, 3, 32, 32))
        pix = np.clip(pix, 0, 255).astype(np.uint8)
        recs = np.concatenate(
            [labels[:, None], pix.reshape(n_per_batch, -1)], axis=1
        ).astype(np.uint8)
        recs.tofile(data_dir / name)
