"""Dense MLP encoder with hand-written reverse mode, plus optimizer updates.

Parameters are stored as float32 between updates; every forward/backward pass
runs in float64.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss evaluates to NaN/Inf; ``component`` names the culprit."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} loss: {value!r}")
        self.component = component
        self.value = value


@dataclass
class EncoderParams:
    """Weights/biases of an MLP: tanh on hidden layers, affine output layer."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("encoder needs at least one layer")
        prev_out = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} disagree")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ShapeError(f"layer {i}: in-dim {w.shape[1]} != previous out-dim {prev_out}")
            prev_out = w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        return [(w.shape, b.shape) for w, b in self.layers]

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def astype(self, dtype) -> EncoderParams:
        return EncoderParams([(w.astype(dtype), b.astype(dtype)) for w, b in self.layers])

    def copy(self) -> EncoderParams:
        return EncoderParams([(w.copy(), b.copy()) for w, b in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> EncoderParams:
        """Inverse of :meth:`flat` (dtype follows ``vec``)."""
        out, pos = [], 0
        for w, b in self.layers:
            nw, nb = w.size, b.size
            out.append((vec[pos:pos + nw].reshape(w.shape).copy(), vec[pos + nw:pos + nw + nb].copy()))
            pos += nw + nb
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {pos}")
        return EncoderParams(out)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return h.hexdigest()

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


# A GradientSet has exactly the layout of the parameters it differentiates.
GradientSet = EncoderParams


def init_encoder(dims: Sequence[int], rng: np.random.Generator) -> EncoderParams:
    """Glorot-uniform weights, zero biases; ``dims`` = [p, hidden..., d]."""
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(np.float32)
        layers.append((w, np.zeros(fan_out, dtype=np.float32)))
    return EncoderParams(layers)


def _check_congruent(a: EncoderParams, b: EncoderParams) -> None:
    if a.shapes != b.shapes:
        raise ShapeError(f"shape mismatch: {a.shapes} vs {b.shapes}")


def _as_batch(params: EncoderParams, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"batch shape {x.shape} does not match encoder input dim {params.input_dim}")
    return x


def normalize_rows(y: np.ndarray) -> np.ndarray:
    return y / (np.linalg.norm(y, axis=1, keepdims=True) + NORM_EPS)


def _forward(params: EncoderParams, x: np.ndarray):
    acts = [x]
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        a = h @ np.asarray(w, dtype=np.float64).T + np.asarray(b, dtype=np.float64)
        h = np.tanh(a) if i < last else a
        acts.append(h)
    return acts


def encoder_forward(params: EncoderParams, batch: np.ndarray) -> np.ndarray:
    """Encode a (b, p) batch into unit-norm (b, d) float64 features."""
    x = _as_batch(params, batch)
    return normalize_rows(_forward(params, x)[-1])


def _backward(params: EncoderParams, acts: list[np.ndarray], dz: np.ndarray) -> GradientSet:
    y = acts[-1]
    r = np.linalg.norm(y, axis=1, keepdims=True)
    s = r + NORM_EPS
    safe_r = np.where(r > 0, r, 1.0)
    proj = np.sum(dz * y, axis=1, keepdims=True)
    delta = dz / s - np.where(r > 0, proj / (safe_r * s * s), 0.0) * y

    grads: list[tuple[np.ndarray, np.ndarray]] = []
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        w = np.asarray(params.layers[i][0], dtype=np.float64)
        if i < last:
            delta = delta * (1.0 - acts[i + 1] ** 2)
        grads.append((delta.T @ acts[i], delta.sum(axis=0)))
        if i > 0:
            delta = delta @ w
    grads.reverse()
    return EncoderParams(grads)


LossFn = Callable[[np.ndarray], tuple[object, np.ndarray]]


def loss_backward(params: EncoderParams, batch: np.ndarray, loss_fn: LossFn):
    """Evaluate ``loss_fn`` on encoded features and backpropagate to ``params``.

    ``loss_fn`` maps the (b, d) normalized features to ``(loss, dloss/dfeatures)``
    where ``loss`` is a float or an object with ``contrast``/``neigh``/``total``
    attributes. Everything else the loss touches is treated as a constant.
    """
    x = _as_batch(params, batch)
    acts = _forward(params, x)
    z = normalize_rows(acts[-1])
    loss, dz = loss_fn(z)
    _check_finite(loss)
    grads = _backward(params, acts, np.asarray(dz, dtype=np.float64))
    return loss, grads


def _check_finite(loss) -> None:
    if hasattr(loss, "total"):
        for name in ("contrast", "neigh"):
            v = getattr(loss, name)
            if not np.isfinite(v):
                raise NonFiniteLossError(name, v)
        if not np.isfinite(loss.total):
            raise NonFiniteLossError("total", loss.total)
    elif not np.isfinite(loss):
        raise NonFiniteLossError("total", float(loss))


def sgd_step(params: EncoderParams, grads: GradientSet, lr: float, weight_decay: float = 0.0) -> EncoderParams:
    if lr < 0:
        raise ValueError("lr must be non-negative")
    _check_congruent(params, grads)
    out = []
    for (w, b), (gw, gb) in zip(params.layers, grads.layers):
        new = []
        for theta, g in ((w, gw), (b, gb)):
            t64 = np.asarray(theta, dtype=np.float64)
            new.append((t64 - lr * (np.asarray(g, dtype=np.float64) + weight_decay * t64)).astype(theta.dtype))
        out.append(tuple(new))
    return EncoderParams(out)


def momentum_update(theta_k: EncoderParams, theta_q: EncoderParams, mu: float) -> EncoderParams:
    """theta_k <- mu * theta_k + (1 - mu) * theta_q, elementwise."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"momentum coefficient must lie in [0, 1], got {mu}")
    _check_congruent(theta_k, theta_q)
    if mu == 1.0:
        return theta_k.copy()
    if mu == 0.0:
        return EncoderParams([(wq.astype(wk.dtype), bq.astype(bk.dtype))
                              for (wk, bk), (wq, bq) in zip(theta_k.layers, theta_q.layers)])
    out = []
    for (wk, bk), (wq, bq) in zip(theta_k.layers, theta_q.layers):
        out.append(tuple(
            (mu * np.asarray(k, dtype=np.float64) + (1.0 - mu) * np.asarray(q, dtype=np.float64)).astype(k.dtype)
            for k, q in ((wk, wq), (bk, bq))
        ))
    return EncoderParams(out)
