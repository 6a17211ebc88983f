"""Datasets and client partitioning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels have different row counts")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray
    honest: bool = True

    def __len__(self) -> int:
        return self.indices.shape[0]


def synth_gaussian_mixture(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    spread: float,
    seed: int,
    separation: float = 2.0,
) -> Dataset:
    """Class ``c`` is drawn from ``N(separation * q_c, spread^2 I)``.

    The ``q_c`` are orthonormal vectors in a random orientation, so the means
    are scaled simplex vertices with every pair at distance
    ``separation * sqrt(2)``, and the discriminative directions are dense
    rather than axis-aligned.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if dim < num_classes:
        raise ValueError("dim must be at least num_classes for simplex means")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
    means = separation * q.T
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.standard_normal((labels.shape[0], dim)) * spread
    features = means[labels] + noise
    perm = rng.permutation(labels.shape[0])
    return Dataset(features[perm], labels[perm], num_classes)


def split_per_class(ds: Dataset, test_per_class: int) -> tuple[Dataset, Dataset]:
    """Hold out the last ``test_per_class`` samples of every class."""
    test_mask = np.zeros(len(ds), dtype=bool)
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if test_per_class >= idx.size:
            raise ValueError(f"class {c} has only {idx.size} samples")
        test_mask[idx[idx.size - test_per_class:]] = True
    return (
        Dataset(ds.features[~test_mask], ds.labels[~test_mask], ds.num_classes),
        Dataset(ds.features[test_mask], ds.labels[test_mask], ds.num_classes),
    )


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> tuple[int, np.ndarray]:
    """Return ``(magic, array)`` from an IDX file holding unsigned bytes."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic >> 8 != 0x08:
        raise ValueError(f"{path}: unsupported IDX magic {magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(data) - header != count:
        raise ValueError(f"{path}: expected {count} data bytes, found {len(data) - header}")
    return magic, np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path) -> Dataset:
    """Load an MNIST-style image/label pair; pixels are scaled to [0, 1]."""
    magic, images = read_idx(images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"{images_path}: bad image magic {magic:#010x}")
    magic, labels = read_idx(labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise ValueError(f"{labels_path}: bad label magic {magic:#010x}")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    return Dataset(features, labels, int(labels.max()) + 1 if labels.size else 0)


def partition_iid(ds: Dataset, n: int, seed: int) -> list[ClientShard]:
    if n < 1:
        raise ValueError("need at least one client")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return [ClientShard(i, np.sort(part)) for i, part in enumerate(np.array_split(perm, n))]


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``proportions`` that sums exactly."""
    raw = proportions / proportions.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    # largest fractional parts first, lower index on ties
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def partition_dirichlet(ds: Dataset, n: int, alpha: float, seed: int) -> list[ClientShard]:
    """Each class is split across clients by its own ``Dir(alpha)`` draw."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if n < 1:
        raise ValueError("need at least one client")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n)]
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        if idx.size == 0:
            continue
        props = rng.dirichlet(np.full(n, alpha))
        counts = largest_remainder(props, idx.size)
        for client, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[client].append(part)
    shards = [np.concatenate(b) if b else np.empty(0, dtype=np.int64) for b in buckets]
    # every client needs data for local SGD
    for i in range(n):
        if shards[i].size == 0:
            donor = max(range(n), key=lambda j: (shards[j].size, -j))
            if shards[donor].size < 2:
                raise ValueError("not enough samples to give every client one")
            shards[i] = shards[donor][-1:]
            shards[donor] = shards[donor][:-1]
    return [ClientShard(i, np.sort(s.astype(np.int64))) for i, s in enumerate(shards)]


def mark_malicious(shards: list[ClientShard], attack_ratio: float, seed: int) -> list[ClientShard]:
    if not 0 <= attack_ratio < 1:
        raise ValueError("attack ratio must lie in [0, 1)")
    f = int(np.floor(attack_ratio * len(shards) + 1e-9))
    bad = set(np.random.default_rng(seed).choice(len(shards), size=f, replace=False).tolist())
    return [replace(s, honest=i not in bad) for i, s in enumerate(shards)]
