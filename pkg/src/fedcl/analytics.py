"""Label-aware measurements: false-negative ratios, kNN/linear probes, metrics files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import EncoderParams, encoder_forward


@dataclass(frozen=True)
class FnRatioReport:
    empirical_local_only: float
    empirical_fused: float
    empirical_remote_only: float
    theoretical_fused: float
    theoretical_remote_only: float
    per_client: dict[int, dict[str, float]] = field(default_factory=dict)


@dataclass(frozen=True)
class ProbeReport:
    knn_accuracy: float
    linear_accuracy: float
    config_digest: str = ""


def empirical_fn_ratio(query_labels: Sequence[int], negative_labels: Sequence[int]) -> float:
    """Fraction of negatives sharing the query's label, averaged over queries."""
    q = np.asarray(query_labels, dtype=np.int64)
    n = np.asarray(negative_labels, dtype=np.int64)
    if n.size == 0:
        raise ValueError("empty negative set")
    if q.size == 0:
        raise ValueError("no queries")
    size = int(max(q.max(), n.max())) + 1
    return fn_ratio_from_histograms(np.bincount(q, minlength=size), np.bincount(n, minlength=size))


def fn_ratio_from_histograms(query_hist: np.ndarray, negative_hist: np.ndarray) -> float:
    """Same quantity as :func:`empirical_fn_ratio`, computed from label counts."""
    qh = np.asarray(query_hist, dtype=np.float64)
    nh = np.asarray(negative_hist, dtype=np.float64)
    if nh.sum() == 0:
        raise ValueError("empty negative set")
    return float(np.dot(qh / qh.sum(), nh / nh.sum()))


def theoretical_fn_ratio_fused(m: int, own_size: float, remote_sizes: Sequence[float],
                               indicators: Sequence[int]) -> float:
    """Closed-form FN ratio with local and remote negatives."""
    sizes = np.asarray(remote_sizes, dtype=np.float64)
    ind = np.asarray(indicators, dtype=np.float64)
    if own_size <= 0 or np.any(sizes <= 0):
        raise ValueError("bank sizes must be positive")
    num = own_size / m + np.sum(ind * sizes) / m
    return float(num / (own_size + sizes.sum()))


def theoretical_fn_ratio_remote(m: int, remote_sizes: Sequence[float], indicators: Sequence[int]) -> float:
    """Closed-form FN ratio when local negatives are dropped."""
    sizes = np.asarray(remote_sizes, dtype=np.float64)
    ind = np.asarray(indicators, dtype=np.float64)
    if sizes.size == 0:
        raise ValueError("no remote clients")
    if np.any(sizes <= 0):
        raise ValueError("bank sizes must be positive")
    return float(np.sum(ind * sizes) / m / sizes.sum())


def _majority(votes: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.zeros((votes.shape[0], num_classes), dtype=np.int64)
    np.add.at(counts, (np.arange(votes.shape[0])[:, None], votes), 1)
    return np.argmax(counts, axis=1)  # ties -> lowest label


def knn_predict(train_feats: np.ndarray, train_y: np.ndarray, test_feats: np.ndarray, k: int,
                num_classes: int) -> np.ndarray:
    sims = test_feats @ train_feats.T
    k = min(k, train_feats.shape[0])
    nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return _majority(train_y[nearest], num_classes)


def knn_probe(params: EncoderParams, train_x: np.ndarray, train_y: np.ndarray,
              test_x: np.ndarray, test_y: np.ndarray, k: int = 10, num_classes: int | None = None) -> float:
    """Cosine kNN accuracy of frozen features."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(train_x) == 0 or len(test_x) == 0:
        raise ValueError("kNN probe needs non-empty train and test sets")
    num_classes = num_classes or int(max(train_y.max(), test_y.max())) + 1
    pred = knn_predict(encoder_forward(params, train_x), np.asarray(train_y),
                       encoder_forward(params, test_x), k, num_classes)
    return float(np.mean(pred == np.asarray(test_y)))


def train_linear_head(feats: np.ndarray, y: np.ndarray, num_classes: int, epochs: int, lr: float,
                      batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by mini-batch SGD, zero-initialized."""
    n, d = feats.shape
    W = np.zeros((num_classes, d))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits = feats[idx] @ W.T + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) / idx.size
            W -= lr * g.T @ feats[idx]
            b -= lr * g.sum(axis=0)
    return W, b


def linear_probe(params: EncoderParams, train_x: np.ndarray, train_y: np.ndarray,
                 test_x: np.ndarray, test_y: np.ndarray, epochs: int = 30, lr: float = 0.5,
                 batch_size: int = 128, seed: int = 0, num_classes: int | None = None) -> float:
    num_classes = num_classes or int(max(train_y.max(), test_y.max())) + 1
    W, b = train_linear_head(encoder_forward(params, train_x), np.asarray(train_y), num_classes,
                             epochs, lr, batch_size, np.random.default_rng(seed))
    pred = np.argmax(encoder_forward(params, test_x) @ W.T + b, axis=1)
    return float(np.mean(pred == np.asarray(test_y)))


METRIC_FIELDS = (
    "round", "mode", "contrast_loss", "neigh_loss", "total_loss",
    "fn_local_only", "fn_fused", "fn_remote_only", "fn_theory_fused", "fn_theory_remote",
    "knn_accuracy", "linear_accuracy", "wall_time",
)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_metrics(reports: Iterable, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.jsonl``, one row per round report."""
    base = Path(path)
    csv_path = base.with_suffix(".csv")
    jsonl_path = base.with_suffix(".jsonl")
    rows = [r.metrics_row() if hasattr(r, "metrics_row") else dict(r) for r in reports]
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
    with jsonl_path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps({k: row[k] for k in METRIC_FIELDS}) + "\n")
    return csv_path, jsonl_path


class MetricsValidationError(ValueError):
    pass


def validate_metrics(csv_path: str | Path, expected_rows: int | None = None) -> int:
    """Schema check for a metrics table; returns the number of data rows."""
    with Path(csv_path).open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MetricsValidationError("empty metrics file") from None
        if tuple(header) != METRIC_FIELDS:
            raise MetricsValidationError(f"unexpected header {header}")
        count = 0
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(METRIC_FIELDS):
                raise MetricsValidationError(f"line {lineno}: {len(row)} fields")
            for name, val in zip(METRIC_FIELDS, row):
                if name == "mode":
                    continue
                try:
                    num = float(val)
                except ValueError:
                    raise MetricsValidationError(f"line {lineno}: {name}={val!r} is not numeric") from None
                if not math.isfinite(num):
                    raise MetricsValidationError(f"line {lineno}: {name} is not finite")
            count += 1
    if expected_rows is not None and count != expected_rows:
        raise MetricsValidationError(f"expected {expected_rows} rows, found {count}")
    return count
