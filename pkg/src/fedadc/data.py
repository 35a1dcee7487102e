"""Synthetic data, non-IID partitioners and per-client class statistics."""
from __future__ import annotations

import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .errors import ConfigError, InputError, PartitionError

log = logging.getLogger(__name__)

MAGIC = b"FADC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

DEFAULT_TEST_FRACTION = 0.2
DIRICHLET_RETRIES = 100


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ConfigError("features must be (n, dim) with one label per row")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise InputError("label outside [0, K)")
        if y.size < self.num_classes:
            raise ConfigError("dataset must hold at least K samples")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_proportions(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes) / len(self)


@dataclass(frozen=True)
class ClientShard:
    """One client's slice of a dataset.

    ``indices[:split]`` is the local training set and ``indices[split:]``
    the local test set. ``gamma``/``rho`` are computed over the whole shard.
    """

    client_id: int
    indices: np.ndarray
    split: int
    gamma: np.ndarray
    rho: np.ndarray

    @property
    def train_indices(self) -> np.ndarray:
        return self.indices[:self.split]

    @property
    def test_indices(self) -> np.ndarray:
        return self.indices[self.split:]

    def __len__(self):
        return self.indices.shape[0]


@dataclass(frozen=True)
class PartitionSpec:
    method: str
    num_clients: int
    s: Optional[int] = None
    alpha: Optional[float] = None
    seed: int = 0
    test_fraction: float = DEFAULT_TEST_FRACTION

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("need at least one client")
        if self.method == "sort-partition":
            if self.s is None or self.s < 1:
                raise ConfigError("sort-partition needs s >= 1")
        elif self.method == "dirichlet":
            if self.alpha is None or not self.alpha > 0:
                raise ConfigError("dirichlet partition needs alpha > 0")
        else:
            raise ConfigError(f"unknown partition method {self.method!r}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")


def class_stats(indices, labels, num_classes: int):
    """Class proportions ``gamma`` and confidence ``rho = gamma / max(gamma)``."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise InputError("class statistics of an empty shard")
    counts = np.bincount(np.asarray(labels)[indices], minlength=num_classes)
    gamma = counts / indices.size
    rho = gamma / gamma.max()
    return gamma, rho


def _class_means(num_classes, dim, separation, rng):
    directions = rng.normal(size=(num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return separation * directions


def _draw(means, per_class, rng, num_classes):
    dim = means.shape[1]
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + rng.normal(size=(labels.size, dim))
    order = rng.permutation(labels.size)
    return LabeledDataset(features[order], labels[order], num_classes)


def _check_synthetic(num_classes, dim, per_class):
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    if dim < 1 or per_class < 1:
        raise ConfigError("dimension and per-class count must be positive")


def gen_synthetic(num_classes: int, dim: int, per_class: int, separation: float,
                  seed: int) -> LabeledDataset:
    """Balanced Gaussian clusters, unit covariance, means on a sphere.

    Equals the training half of ``gen_train_test`` with the same seed.
    """
    _check_synthetic(num_classes, dim, per_class)
    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, dim, separation, rng)
    return _draw(means, per_class, rng, num_classes)


def gen_train_test(num_classes: int, dim: int, per_class: int, test_per_class: int,
                   separation: float, seed: int):
    """Training pool and a held-out global test set from the same clusters."""
    _check_synthetic(num_classes, dim, per_class)
    if test_per_class < 1:
        raise ConfigError("test set needs at least one sample per class")
    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, dim, separation, rng)
    train = _draw(means, per_class, rng, num_classes)
    test = _draw(means, test_per_class, rng, num_classes)
    return train, test


def _make_shards(groups, labels, num_classes, rng, test_fraction):
    shards = []
    for cid, idx in enumerate(groups):
        idx = np.asarray(idx, dtype=np.int64)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(idx.size * test_fraction)
        gamma, rho = class_stats(idx, labels, num_classes)
        shards.append(ClientShard(cid, idx, idx.size - n_test, gamma, rho))
    return shards


def sort_and_partition(ds: LabeledDataset, num_clients: int, s: int, seed: int,
                       test_fraction: float = DEFAULT_TEST_FRACTION) -> List[ClientShard]:
    """Label-sorted blocking: ``num_clients * s`` equal blocks, ``s`` per client.

    Blocks never straddle two classes, so every client holds at most ``s``
    labels. Each class gets an equal share of the blocks (larger classes take
    the leftovers); samples at the end of a class run that do not fill a
    block are dropped and logged.
    """
    if not 1 <= s <= ds.num_classes:
        raise ConfigError(f"s must lie in [1, {ds.num_classes}], got {s}")
    if num_clients < 1:
        raise ConfigError("need at least one client")
    n_blocks = num_clients * s
    order = np.argsort(ds.labels, kind="stable")
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    present = np.flatnonzero(counts)
    per_class = np.zeros(ds.num_classes, dtype=np.int64)
    q, r = divmod(n_blocks, present.size)
    per_class[present] = q
    # leftover blocks go to the largest classes, lower label first on ties
    per_class[present[np.argsort(-counts[present], kind="stable")[:r]]] += 1
    used = per_class > 0
    size = int(np.min(counts[used] // per_class[used]))
    if size == 0:
        raise ConfigError(f"{len(ds)} samples cannot fill {n_blocks} label-pure blocks")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    blocks = [order[starts[k] + j * size: starts[k] + (j + 1) * size]
              for k in range(ds.num_classes) for j in range(per_class[k])]
    dropped = len(ds) - n_blocks * size
    if dropped:
        log.warning("sort-partition dropped %d samples that do not fill a block", dropped)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_blocks)
    groups = [np.concatenate([blocks[b] for b in perm[c * s:(c + 1) * s]])
              for c in range(num_clients)]
    return _make_shards(groups, ds.labels, ds.num_classes, rng, test_fraction)


def _largest_remainder(props, total):
    raw = props * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps lower client index first on equal remainders
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(ds: LabeledDataset, num_clients: int, alpha: float, seed: int,
                        test_fraction: float = DEFAULT_TEST_FRACTION) -> List[ClientShard]:
    """Per-class client proportions from ``Dir(alpha * 1_N)``.

    A draw that leaves any client empty is discarded and redrawn in full, up
    to ``DIRICHLET_RETRIES`` times.
    """
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    if num_clients < 1:
        raise ConfigError("need at least one client")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]
    for _ in range(DIRICHLET_RETRIES):
        groups = [[] for _ in range(num_clients)]
        for idx in by_class:
            if idx.size == 0:
                continue
            idx = idx[rng.permutation(idx.size)]
            props = rng.dirichlet(np.full(num_clients, alpha))
            counts = _largest_remainder(props, idx.size)
            bounds = np.concatenate([[0], np.cumsum(counts)])
            for c in range(num_clients):
                groups[c].append(idx[bounds[c]:bounds[c + 1]])
        groups = [np.concatenate(g) for g in groups]
        if all(g.size > 0 for g in groups):
            return _make_shards(groups, ds.labels, ds.num_classes, rng, test_fraction)
    raise PartitionError(
        f"dirichlet partition left a client empty after {DIRICHLET_RETRIES} draws "
        f"(alpha={alpha}, N={num_clients})"
    )


def partition(ds: LabeledDataset, spec: PartitionSpec) -> List[ClientShard]:
    if spec.method == "sort-partition":
        return sort_and_partition(ds, spec.num_clients, spec.s, spec.seed, spec.test_fraction)
    return dirichlet_partition(ds, spec.num_clients, spec.alpha, spec.seed, spec.test_fraction)


def save_dataset(ds: LabeledDataset, path) -> None:
    """Write the flat binary format (header, f64 features, u32 labels), atomically."""
    path = os.fspath(path)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(ds), ds.dim, ds.num_classes)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(ds.features.astype("<f8").tobytes(order="C"))
            fh.write(ds.labels.astype("<u4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise InputError("dataset file truncated")
    magic, version, n, dim, k = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise InputError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported dataset version {version}")
    expected = _HEADER.size + 8 * n * dim + 4 * n
    if len(raw) != expected:
        raise InputError(f"dataset file has {len(raw)} bytes, header implies {expected}")
    off = _HEADER.size
    features = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=off).reshape(n, dim)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 8 * n * dim)
    return LabeledDataset(features.astype(np.float64), labels.astype(np.int64), k)
