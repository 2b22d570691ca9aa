"""Gaussian-mixture datasets, client partitioning and two-view augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FCLD_MAGIC = b"FCLD"
FCLD_VERSION = 1
_HEADER = struct.Struct("<4sHHIH")


class PartitionError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # (n, p) float32
    labels: np.ndarray  # (n,) int64, analytics-only
    num_classes: int

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray  # positions in the parent dataset
    x: np.ndarray
    labels: np.ndarray
    class_set: frozenset[int]

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    origin_index: int


def class_directions(num_classes: int, p: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Unit mean directions: canonical axes when p >= M, random unit vectors otherwise."""
    if p >= num_classes:
        return np.eye(p)[:num_classes]
    if rng is None:
        raise ValueError("random directions need an rng when p < M")
    u = rng.standard_normal((num_classes, p))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def generate_gaussian_mixture(
    num_classes: int,
    per_class_n: int,
    p: int,
    separation: float,
    noise_sigma: float,
    seed: int,
    directions: np.ndarray | None = None,
) -> Dataset:
    """Balanced mixture; class c ~ N(separation * u_c, noise_sigma^2 I), rows sorted by class."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if per_class_n < 1 or p < 1:
        raise ValueError("per_class_n and p must be positive")
    if separation <= 0 or noise_sigma < 0:
        raise ValueError("separation must be > 0 and noise_sigma >= 0")
    rng = np.random.default_rng(seed)
    if directions is None:
        directions = class_directions(num_classes, p, rng)
    if directions.shape != (num_classes, p):
        raise ValueError(f"directions shape {directions.shape} != {(num_classes, p)}")
    labels = np.repeat(np.arange(num_classes), per_class_n)
    noise = rng.standard_normal((labels.size, p))
    x = separation * directions[labels] + noise_sigma * noise
    return Dataset(x.astype(np.float32), labels.astype(np.int64), num_classes)


def partition(
    dataset: Dataset,
    num_clients: int,
    mode: str = "iid",
    m: int | None = None,
    seed: int = 0,
    require_cover: bool = True,
) -> list[ClientShard]:
    """Split ``dataset`` across clients, either IID or with ``m`` classes per client.

    Non-IID shards are equal-sized: each client takes the same number of samples
    from each of its classes.
    """
    if num_clients < 1:
        raise PartitionError("need at least one client")
    rng = np.random.default_rng(seed)
    n, M = len(dataset), dataset.num_classes
    if mode == "iid":
        perm = rng.permutation(n)
        parts = np.array_split(perm, num_clients)
        return [_shard(dataset, c, np.sort(idx)) for c, idx in enumerate(parts)]
    if mode != "noniid":
        raise PartitionError(f"unknown partition mode {mode!r}")
    if m is None or not 1 <= m <= M:
        raise PartitionError(f"non-IID partition needs 1 <= m <= {M}, got {m}")

    if m * num_clients == M:
        assignment = [list(range(c * m, c * m + m)) for c in range(num_clients)]
    else:
        order = rng.permutation(M)
        assignment = [[int(order[(c * m + j) % M]) for j in range(m)] for c in range(num_clients)]
    holders: dict[int, list[int]] = {k: [] for k in range(M)}
    for c, classes in enumerate(assignment):
        for k in classes:
            holders[k].append(c)
    uncovered = sorted(k for k, hs in holders.items() if not hs)
    if uncovered and require_cover:
        raise PartitionError(f"m*C = {m * num_clients} < M = {M}; uncovered classes: {uncovered}")

    by_class = {k: rng.permutation(np.flatnonzero(dataset.labels == k)) for k in range(M)}
    quota = min(len(by_class[k]) // len(hs) for k, hs in holders.items() if hs)
    if quota == 0:
        raise PartitionError("too few samples per class for this many holders")
    picked: dict[int, list[np.ndarray]] = {c: [] for c in range(num_clients)}
    for k, hs in holders.items():
        for slot, c in enumerate(hs):
            picked[c].append(by_class[k][slot * quota:(slot + 1) * quota])
    return [_shard(dataset, c, np.sort(np.concatenate(picked[c]))) for c in range(num_clients)]


def _shard(dataset: Dataset, client_id: int, idx: np.ndarray) -> ClientShard:
    labels = dataset.labels[idx]
    return ClientShard(
        client_id=client_id,
        indices=idx,
        x=dataset.x[idx],
        labels=labels,
        class_set=frozenset(int(v) for v in np.unique(labels)),
    )


def augment(x: np.ndarray, aug_sigma: float, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    """One stochastic view of each row: coordinate dropout on x, then Gaussian jitter."""
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError("drop_prob must lie in [0, 1)")
    x = np.asarray(x, dtype=np.float64)
    keep = rng.random(x.shape) >= drop_prob
    return x * keep + aug_sigma * rng.standard_normal(x.shape)


def augment_two_views(sample: np.ndarray, aug_sigma: float, drop_prob: float,
                      rng: np.random.Generator, origin_index: int = -1) -> ViewPair:
    a = augment(sample, aug_sigma, drop_prob, rng)
    b = augment(sample, aug_sigma, drop_prob, rng)
    return ViewPair(a, b, origin_index)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    n, p = dataset.x.shape
    if dataset.num_classes > 0xFFFF or p > 0xFFFF or n > 0xFFFFFFFF:
        raise DatasetFormatError("dataset too large for the FCLD header")
    path = Path(path)
    try:
        with path.open("wb") as fh:
            fh.write(_HEADER.pack(FCLD_MAGIC, FCLD_VERSION, dataset.num_classes, n, p))
            fh.write(np.ascontiguousarray(dataset.x, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(dataset.labels, dtype="<u2").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc.strerror or exc}") from exc


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: file shorter than FCLD header")
    magic, version, M, n, p = _HEADER.unpack_from(raw)
    if magic != FCLD_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != FCLD_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n * p + 2 * n
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: size {len(raw)} != expected {expected}")
    off = _HEADER.size
    x = np.frombuffer(raw, dtype="<f4", count=n * p, offset=off).reshape(n, p).astype(np.float32)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off + 4 * n * p).astype(np.int64)
    if n and labels.max() >= M:
        raise DatasetFormatError(f"{path}: label {labels.max()} out of range for M={M}")
    return Dataset(x, labels, M)


def shard_as_dataset(shard: ClientShard, num_classes: int) -> Dataset:
    return Dataset(shard.x, shard.labels, num_classes)
