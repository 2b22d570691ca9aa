"""FIFO feature queues and the per-client remote negative set."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

LOCAL = "local"
ENCRYPTED_LOCAL = "encrypted_local"
REMOTE = "remote"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class MemoryBank:
    """Fixed-capacity FIFO of unit-norm features.

    Every enqueue builds a fresh array, so any previously returned ``features``
    snapshot stays valid and unchanged. ``labels`` is an analytics side channel
    (origin-sample class per entry) and is never read by training code.
    """

    def __init__(self, capacity: int, dim: int, tag: str = LOCAL):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.tag = tag
        self._features = _frozen(np.zeros((0, dim), dtype=np.float32))
        self._labels = _frozen(np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self._features.shape[0]

    @property
    def features(self) -> np.ndarray:
        return self._features

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    def enqueue(self, features: np.ndarray, labels: np.ndarray | None = None) -> MemoryBank:
        feats = np.asarray(features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[1] != self.dim:
            raise ValueError(f"expected (b, {self.dim}) features, got {feats.shape}")
        if labels is None:
            labels = np.full(feats.shape[0], -1, dtype=np.int64)
        if feats.shape[0] > self.capacity:
            warnings.warn(f"enqueue of {feats.shape[0]} features exceeds capacity {self.capacity}; "
                          "keeping the newest", stacklevel=2)
        merged = np.concatenate([self._features, feats])[-self.capacity:]
        merged_labels = np.concatenate([self._labels, np.asarray(labels, dtype=np.int64)])[-self.capacity:]
        self._features = _frozen(np.ascontiguousarray(merged))
        self._labels = _frozen(np.ascontiguousarray(merged_labels))
        return self

    def replace(self, features: np.ndarray, labels: np.ndarray | None = None) -> MemoryBank:
        self._features = _frozen(np.zeros((0, self.dim), dtype=np.float32))
        self._labels = _frozen(np.zeros(0, dtype=np.int64))
        return self.enqueue(features, labels)

    def label_histogram(self, num_classes: int) -> np.ndarray:
        lab = self._labels[self._labels >= 0]
        return np.bincount(lab, minlength=num_classes).astype(np.int64)


def enqueue_batch(bank: MemoryBank, features: np.ndarray, labels: np.ndarray | None = None) -> MemoryBank:
    return bank.enqueue(features, labels)


@dataclass
class RemoteBankSet:
    """Q_{s,c}: every uploaded feature bank except the owner's own."""

    owner: int | None
    banks: dict[int, np.ndarray] = field(default_factory=dict)
    dim: int | None = None

    def __post_init__(self) -> None:
        self._flat: np.ndarray | None = None

    @property
    def features(self) -> np.ndarray:
        if self._flat is None:
            parts = [self.banks[k] for k in sorted(self.banks)]
            if parts:
                flat = np.concatenate(parts).astype(np.float32, copy=False)
            else:
                flat = np.zeros((0, self.dim or 0), dtype=np.float32)
            self._flat = _frozen(np.ascontiguousarray(flat))
        return self._flat

    def __len__(self) -> int:
        return sum(b.shape[0] for b in self.banks.values())

    @classmethod
    def from_flat(cls, owner: int | None, features: np.ndarray) -> RemoteBankSet:
        feats = np.asarray(features, dtype=np.float32)
        out = cls(owner, {-1: feats} if feats.shape[0] else {}, dim=feats.shape[1])
        return out


def assemble_remote(all_encrypted_banks: Mapping[int, np.ndarray], self_id: int | None,
                    dim: int | None = None) -> RemoteBankSet:
    banks = {cid: _frozen(np.array(f, dtype=np.float32)) for cid, f in all_encrypted_banks.items() if cid != self_id}
    if dim is None and all_encrypted_banks:
        dim = next(iter(all_encrypted_banks.values())).shape[1]
    return RemoteBankSet(self_id, banks, dim)
