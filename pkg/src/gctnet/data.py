"""MNIST (IDX) and CIFAR-10 (binary batch) loading, standardization and batching."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
AUGMENTATIONS = ("none", "flip_crop")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W) float32
    labels: np.ndarray          # (N,) int64
    class_count: int
    mean: np.ndarray | None = None  # per-channel stats once standardized
    std: np.ndarray | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def _read(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise DataError(f"{path}: truncated IDX payload ({len(raw) - head} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_mnist(images_path, labels_path) -> Dataset:
    """IDX image/label pair -> (N, 1, 28, 28) images scaled to [0, 1]."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataError(f"{images_path} has {len(images)} images but {labels_path} "
                        f"has {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), 10)


def load_cifar10(batch_paths) -> Dataset:
    """Concatenate CIFAR-10 binary batches into (N, 3, 32, 32) images in [0, 1]."""
    if isinstance(batch_paths, (str, Path)):
        batch_paths = [batch_paths]
    xs, ys = [], []
    for path in batch_paths:
        raw = _read(path)
        if not raw or len(raw) % CIFAR_RECORD:
            raise DataError(f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    if not xs:
        raise DataError("no CIFAR-10 batch files given")
    x = np.concatenate(xs).astype(np.float32) / 255.0
    return Dataset(x, np.concatenate(ys), 10)


def write_idx(path, array: np.ndarray):
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        f.write(array.tobytes())


def write_cifar10_batch(path, images: np.ndarray, labels):
    """``images``: uint8 (N, 3, 32, 32)."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


def channel_stats(ds: Dataset):
    x = ds.images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def standardize(ds: Dataset, mean=None, std=None) -> Dataset:
    """Per-channel standardization. Pass the training split's stats to other splits."""
    if mean is None or std is None:
        mean, std = channel_stats(ds)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    x = (ds.images - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(ds, images=x.astype(np.float32), mean=mean, std=std)


def destandardize(ds: Dataset) -> np.ndarray:
    return (ds.images * ds.std[None, :, None, None] + ds.mean[None, :, None, None]).astype(np.float32)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def flip_crop(x: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    """Horizontal flip with p=0.5, then a random crop from the zero-padded image."""
    n, c, h, w = x.shape
    flip = rng.random(n) < 0.5
    oy = rng.integers(0, 2 * pad + 1, n)
    ox = rng.integers(0, 2 * pad + 1, n)
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    for i in range(n):
        out[i] = xp[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
    return out


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int = 0, augment: str = "none"):
    """Yield ``(images, labels)`` batches for one epoch in a seeded order.

    The permutation and the augmentation draws both derive from ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if augment not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {augment!r}")
    order = epoch_order(len(ds), seed, epoch)
    aug_rng = np.random.default_rng([seed, epoch, 1])
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x = ds.images[idx]
        if augment == "flip_crop":
            x = flip_crop(x, aug_rng)
        yield x, ds.labels[idx]


def synthetic_images(n: int, seed: int = 0, classes: int = 10, channels: int = 3, size: int = 32):
    """Class-conditional oriented gratings with colour tints and noise, as uint8 (N, C, S, S).

    A stand-in when the real datasets are not available; learnable but not trivial.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    theta = np.pi * labels / classes + rng.normal(0, 0.15, n)
    freq = 3.0 + (labels % 3) + rng.normal(0, 0.3, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    proj = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy)
    wave = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    tint = np.stack([0.5 + 0.4 * np.cos(2 * np.pi * (labels / classes + k / channels))
                     for k in range(channels)], axis=1)
    img = 0.5 + 0.35 * wave[:, None] * tint[:, :, None, None] + rng.normal(0, 0.12, (n, channels, size, size))
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8), labels.astype(np.int64)


def synthetic_dataset(n: int, seed: int = 0, **kw) -> Dataset:
    images, labels = synthetic_images(n, seed, **kw)
    return Dataset(images.astype(np.float32) / 255.0, labels, kw.get("classes", 10))
