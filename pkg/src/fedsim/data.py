"""Dataset loading (MNIST IDX, synthetic Gaussian blobs) and the
degree-of-non-iid client partitioner.

Inputs are normalized into [0, 1] at load/generation time, for the train
and test splits alike, so downstream smoothness bounds stay valid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numcore import STREAM_DATAGEN, STREAM_PARTITION, RngStream, derive_seed

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for IDX file-format problems."""


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # N x dim, float64 in [0, 1]
    labels: np.ndarray  # N, int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("dataset inputs must be a nonempty 2-D array")
        if y.shape != (x.shape[0],):
            raise ValueError("label count must match input count")
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise ValueError("labels out of range")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)

    @property
    def size(self) -> int:
        return int(self.indices.size)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"unexpected end of file while reading {what}")
    return buf


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Load an MNIST-style IDX image/label pair.

    Pixels are scaled into [0, 1] by dividing by 255. Raises
    BadMagicError, TruncatedFileError, or CountMismatchError for the
    respective format violations.
    """
    with open(images_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "image magic"))
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagicError(f"image file magic {magic:#010x} != {IDX_IMAGE_MAGIC:#010x}")
        count, rows, cols = struct.unpack(">III", _read_exact(f, 12, "image header"))
        raw = _read_exact(f, count * rows * cols, "image pixels")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "label magic"))
        if magic != IDX_LABEL_MAGIC:
            raise BadMagicError(f"label file magic {magic:#010x} != {IDX_LABEL_MAGIC:#010x}")
        (label_count,) = struct.unpack(">I", _read_exact(f, 4, "label header"))
        labels = np.frombuffer(_read_exact(f, label_count, "labels"), dtype=np.uint8)
    if label_count != count:
        raise CountMismatchError(f"{count} images but {label_count} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), 10)


def _class_centers(num_classes: int, dim: int) -> np.ndarray:
    """Deterministic unit-norm class centers, chosen for spread: standard
    basis vectors when classes fit, otherwise equally spaced directions in
    the first two coordinates."""
    centers = np.zeros((num_classes, dim))
    if num_classes <= dim:
        centers[np.arange(num_classes), np.arange(num_classes)] = 1.0
    elif dim >= 2:
        angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
        centers[:, 0] = np.cos(angles)
        centers[:, 1] = np.sin(angles)
    else:
        centers[:, 0] = np.where(np.arange(num_classes) % 2 == 0, 1.0, -1.0)
    return centers


def gen_synthetic(
    num_classes: int, dim: int, n_per_class: int, separation: float, seed: int
) -> Dataset:
    """Gaussian-blob classification data, affinely mapped into [0, 1].

    Class c is N(separation * mu_c, I) with unit-norm centers mu_c; the
    whole construction is deterministic given the seed.
    """
    if min(num_classes, dim, n_per_class) < 1 or separation <= 0:
        raise ValueError("num_classes, dim, n_per_class, and separation must be positive")
    centers = _class_centers(num_classes, dim)
    sample_rng = RngStream(derive_seed(seed, STREAM_DATAGEN, 1, 0))
    noise = sample_rng.normals(num_classes * n_per_class * dim)
    noise = noise.reshape(num_classes * n_per_class, dim)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    raw = separation * centers[labels] + noise
    lo, hi = raw.min(), raw.max()
    inputs = (raw - lo) / (hi - lo)
    return Dataset(inputs, labels, num_classes)


def partition_noniid(dataset: Dataset, n_clients: int, q: float, seed: int) -> list[ClientShard]:
    """Split a dataset into client shards with tunable label skew.

    Clients are divided into num_classes groups as evenly as possible.
    An example with label l goes to group l with probability q and to each
    other group with probability (1 - q) / (num_classes - 1), then to a
    uniformly random client inside the chosen group. q = 1/num_classes is
    the iid point; q = 1 gives each group only its own label.
    """
    c = dataset.num_classes
    if n_clients < c:
        raise ValueError(f"need at least num_classes={c} clients, got {n_clients}")
    if not (1.0 / c - 1e-12 <= q <= 1.0 + 1e-12):
        raise ValueError(f"q must lie in [1/num_classes, 1], got {q}")
    bounds = [(g * n_clients) // c for g in range(c + 1)]
    rng = RngStream(derive_seed(seed, STREAM_PARTITION, 0, 0))
    n = dataset.size
    u_group = rng.uniforms(n)
    u_client = rng.uniforms(n)

    assigned = [[] for _ in range(n_clients)]
    off = (1.0 - q) / (c - 1) if c > 1 else 0.0
    for i in range(n):
        label = int(dataset.labels[i])
        u = u_group[i]
        # group pick: label group owns mass q, the others share 1 - q
        if u < q:
            g = label
        else:
            slot = int((u - q) / off) if off > 0 else 0
            slot = min(slot, c - 2)
            g = slot if slot < label else slot + 1
        lo, hi = bounds[g], bounds[g + 1]
        member = lo + int(u_client[i] * (hi - lo))
        member = min(member, hi - 1)
        assigned[member].append(i)
    return [
        ClientShard(cid, np.array(idx, dtype=np.int64))
        for cid, idx in enumerate(assigned)
    ]
