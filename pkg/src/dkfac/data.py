"""Datasets: seeded Gaussian mixtures, IDX files and per-worker sharding."""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    sample_shape: tuple = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on the number of samples")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if self.sample_shape is None:
            self.sample_shape = tuple(self.inputs.shape[1:])

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx, split=None):
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes, split or self.split, self.sample_shape)


def gen_synthetic(seed, n_samples, n_features, n_classes, difficulty):
    """Gaussian mixture: class ``c`` is a unit-variance blob around ``difficulty * u_c``.

    ``u_c`` is a seeded random unit vector; labels are balanced and shuffled.
    """
    if min(n_samples, n_features, n_classes) <= 0:
        raise ValueError("n_samples, n_features and n_classes must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, n_features))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= difficulty
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    inputs = centers[labels] + rng.standard_normal((n_samples, n_features))
    return Dataset(inputs, labels, n_classes, "train")


def train_val_split(dataset, n_val):
    """Last ``n_val`` samples become the validation split (the generator already shuffles)."""
    if not 0 < n_val < len(dataset):
        raise ValueError("n_val must leave both splits non-empty")
    cut = len(dataset) - n_val
    return dataset.subset(slice(0, cut), "train"), dataset.subset(slice(cut, None), "val")


def synthetic_splits(seed, n_train, n_val, n_features, n_classes, difficulty):
    full = gen_synthetic(seed, n_train + n_val, n_features, n_classes, difficulty)
    return train_val_split(full, n_val)


# ------------------------------------------------------------------ IDX --

def _read_idx(path, expected_magic, ndim):
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: truncated or oversized file ({len(raw)} bytes, expected {expected})")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    return data


def load_idx(images_path, labels_path, n_classes=None, split="train"):
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES, 3)
    labels = _read_idx(labels_path, IDX_LABELS, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, h, w = images.shape
    inputs = images.reshape(n, h * w).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n else 1
    return Dataset(inputs, labels, n_classes, split, (1, h, w))


def write_idx(images_path, labels_path, images, labels):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, labels.shape[0]) + labels.tobytes())


# ------------------------------------------------------------- sharding --

def epoch_permutation(seed, epoch, n):
    return np.random.default_rng(seed ^ epoch).permutation(n)


def shard_batches(dataset, epoch, global_batch, world_size, seed):
    """Yield one list of ``(inputs, labels)`` shards per global batch of ``epoch``.

    The epoch order is a permutation seeded by ``seed ^ epoch``; rank ``r``
    takes the ``r``-th contiguous slice of each global batch.  The tail that
    does not fill a global batch is dropped.
    """
    if global_batch % world_size:
        raise ValueError("global_batch must be divisible by world_size")
    perm = epoch_permutation(seed, epoch, len(dataset))
    local = global_batch // world_size
    for b in range(len(dataset) // global_batch):
        idx = perm[b * global_batch : (b + 1) * global_batch]
        yield [
            (dataset.inputs[idx[r * local : (r + 1) * local]], dataset.labels[idx[r * local : (r + 1) * local]])
            for r in range(world_size)
        ]
