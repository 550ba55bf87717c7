"""Dataset ingestion (IDX, CIFAR binary), synthetic blobs, and batch iteration."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

IDX_UBYTE = 0x08
CIFAR_IMAGE_SHAPE = (3, 32, 32)
CIFAR_RECORD = 1 + 3 * 32 * 32

# desk-scale default, and the batch size used for the full-size benchmarks
BATCH_PRESETS = {"desk": 128, "benchmark": 512}


@dataclass
class DatasetHandle:
    images: np.ndarray  # uint8, (N, C, H, W)
    labels: np.ndarray  # int64, (N,)
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8:
            raise DataError(f"images must be uint8, got {self.images.dtype}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "DatasetHandle":
        idx = np.asarray(indices)
        return DatasetHandle(self.images[idx], self.labels[idx], self.num_classes, self.split)

    def take(self, n: int, seed: int = 0) -> "DatasetHandle":
        """Random ``n``-sample subset (deterministic in ``seed``)."""
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return self.subset(idx)

    def split_off(self, fraction: float, seed: int = 0) -> tuple["DatasetHandle", "DatasetHandle"]:
        """Split into ``(rest, held_out)`` with ``fraction`` of samples held out."""
        perm = np.random.default_rng(seed).permutation(len(self))
        k = int(round(fraction * len(self)))
        held = self.subset(np.sort(perm[:k]))
        held.split = "val"
        return self.subset(np.sort(perm[k:])), held


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != IDX_UBYTE or ndim < 1:
        raise DataError(f"{path}: bad IDX magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataError(f"{path}: truncated IDX payload ({len(raw) - header} of {count} bytes)")
    if len(raw) - header > count:
        raise DataError(f"{path}: {len(raw) - header - count} trailing bytes after IDX payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims).copy()


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataError(f"IDX writer supports uint8 only, got {array.dtype}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, IDX_UBYTE, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> DatasetHandle:
    """MNIST-style image/label IDX pair.  3-d image files gain a channel axis."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim not in (3, 4):
        raise DataError(f"{images_path}: image file must have 3 or 4 dimensions, got {images.ndim}")
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: label file must have 1 dimension, got {labels.ndim}")
    if len(images) != len(labels):
        raise DataError(f"image/label count mismatch: {len(images)} images vs {len(labels)} labels")
    if images.ndim == 3:
        images = images[:, None]
    classes = num_classes or (int(labels.max()) + 1 if labels.size else 1)
    return DatasetHandle(images, labels.astype(np.int64), classes, split)


def save_idx(handle: DatasetHandle, images_path, labels_path) -> None:
    write_idx(images_path, handle.images)
    write_idx(labels_path, handle.labels.astype(np.uint8))


# ---------------------------------------------------------------------------
# CIFAR binary
# ---------------------------------------------------------------------------

def load_cifar_binary(paths, num_classes: int = 10, label_bytes: int = 1, split: str = "train") -> DatasetHandle:
    """CIFAR binary batches: per record ``label_bytes`` label bytes then 3072 channel-major pixels.

    For CIFAR-100 (``label_bytes=2``) the fine label, the second byte, is used.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    record = label_bytes + CIFAR_RECORD - 1
    chunks = []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % record:
            raise DataError(f"{path}: length {raw.size} is not a positive multiple of {record}")
        chunks.append(raw.reshape(-1, record))
    data = np.concatenate(chunks)
    labels = data[:, label_bytes - 1].astype(np.int64)
    images = data[:, label_bytes:].reshape(-1, *CIFAR_IMAGE_SHAPE)
    return DatasetHandle(images, labels, num_classes, split)


def save_cifar_binary(handle: DatasetHandle, path) -> None:
    if handle.images.shape[1:] != CIFAR_IMAGE_SHAPE:
        raise DataError(f"CIFAR records hold {CIFAR_IMAGE_SHAPE} images, got {handle.images.shape[1:]}")
    if handle.labels.size and handle.labels.max() > 255:
        raise DataError("CIFAR labels must fit in one byte")
    out = np.empty((len(handle), CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = handle.labels
    out[:, 1:] = handle.images.reshape(len(handle), -1)
    out.tofile(path)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def synth_blobs(classes: int, per_class: int, dims=(3, 8, 8), seed: int = 0, split: str = "train",
                noise: float = 32.0, clusters_per_class: int = 1, separation: float = 64.0) -> DatasetHandle:
    """Gaussian clusters around class-dependent means, quantised to bytes.

    Cluster means depend only on ``seed``; the sampled points also depend on
    ``split``, so train and test splits share their class structure.
    """
    if classes < 1 or per_class < 1 or clusters_per_class < 1:
        raise DataError("classes, per_class and clusters_per_class must be positive")
    dims = (int(dims),) if np.isscalar(dims) else tuple(int(d) for d in dims)
    if min(dims) < 1:
        raise DataError(f"dims must be positive, got {dims}")
    means_rng = np.random.default_rng([seed, 0])
    means = 128.0 + separation * means_rng.uniform(-1.0, 1.0, size=(classes, clusters_per_class, *dims))
    rng = np.random.default_rng([seed, 1 + sum(split.encode())])
    labels = np.repeat(np.arange(classes), per_class)
    cluster = rng.integers(0, clusters_per_class, size=labels.size)
    points = means[labels, cluster] + noise * rng.standard_normal((labels.size, *dims))
    order = rng.permutation(labels.size)
    images = np.clip(np.rint(points[order]), 0, 255).astype(np.uint8)
    return DatasetHandle(images, labels[order], classes, split)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def channel_stats(handle: DatasetHandle) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation (axis 1) over the whole split."""
    x = handle.images.astype(np.float64)
    axes = (0,) + tuple(range(2, x.ndim))
    std = x.std(axis=axes)
    return x.mean(axis=axes), np.where(std > 0, std, 1.0)


class BatchIterator:
    """Shuffled, normalised mini-batches over one dataset split.

    One pass visits every sample exactly once; the order is a pure function of
    ``(seed, epoch)``.  Exhaustion raises :class:`StopIteration`, marking the
    end of the epoch.
    """

    def __init__(self, handle: DatasetHandle, batch_size: int = 128, seed: int = 0, mean=None, std=None,
                 augment: bool = False, train: bool = True, shuffle: bool = True, dtype=np.float64):
        if batch_size < 1:
            raise DataError("batch_size must be positive")
        self.handle = handle
        self.batch_size = batch_size
        self.seed = seed
        if mean is None or std is None:
            mean, std = channel_stats(handle)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.augment = augment
        self.train = train
        self.shuffle = shuffle
        self.dtype = np.dtype(dtype)
        self.reset(0)

    def __len__(self) -> int:
        return -(-len(self.handle) // self.batch_size)

    def reset(self, epoch: int) -> None:
        self.epoch = epoch
        n = len(self.handle)
        self._order = np.random.default_rng([self.seed, epoch]).permutation(n) if self.shuffle else np.arange(n)
        self._pos = 0
        self._batch = 0

    def _normalise(self, images: np.ndarray) -> np.ndarray:
        shape = (1, -1) + (1,) * (images.ndim - 2)
        return ((images.astype(np.float64) - self.mean.reshape(shape)) / self.std.reshape(shape)).astype(self.dtype)

    def _augment(self, x: np.ndarray) -> np.ndarray:
        rng = np.random.default_rng([self.seed, self.epoch, self._batch, 7])
        B, C, H, W = x.shape
        padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)))
        out = np.empty_like(x)
        dy = rng.integers(0, 9, B)
        dx = rng.integers(0, 9, B)
        flip = rng.random(B) < 0.5
        for i in range(B):
            crop = padded[i, :, dy[i]: dy[i] + H, dx[i]: dx[i] + W]
            out[i] = crop[:, :, ::-1] if flip[i] else crop
        return out

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        if self._pos >= len(self.handle):
            raise StopIteration
        idx = self._order[self._pos: self._pos + self.batch_size]
        x = self._normalise(self.handle.images[idx])
        if self.augment and self.train and x.ndim == 4:
            x = self._augment(x)
        self._pos += len(idx)
        self._batch += 1
        return x, self.handle.labels[idx]

    def __iter__(self):
        while True:
            try:
                yield self.next_batch()
            except StopIteration:
                return


def next_batch(it: BatchIterator):
    return it.next_batch()
