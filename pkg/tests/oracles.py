"""Independent reference computations used by the tests."""

from __future__ import annotations

import numpy as np

from fedcl.core import EncoderParams


def central_differences(params: EncoderParams, loss_of: callable, h: float = 1e-4,
                        piece_of: callable | None = None) -> np.ndarray:
    """Numerical gradient of ``loss_of(params)`` over the flattened parameters.

    For piecewise-smooth losses, ``piece_of(params)`` names the smooth piece
    (e.g. the selected neighbor sets); the step is halved until both stencil
    points stay on the same piece as the base point.
    """
    base = params.flat().astype(np.float64)
    grad = np.zeros_like(base)
    home = piece_of(params) if piece_of is not None else None
    for i in range(base.size):
        step = h
        while True:
            up = base.copy()
            up[i] += step
            down = base.copy()
            down[i] -= step
            p_up, p_down = params.with_flat(up), params.with_flat(down)
            if piece_of is None or step < 1e-9 or piece_of(p_up) == home == piece_of(p_down):
                break
            step /= 2
        grad[i] = (loss_of(p_up) - loss_of(p_down)) / (2 * step)
    return grad


def top_n_piece(x: np.ndarray, candidates: np.ndarray, n: int) -> callable:
    """Piece label for losses that select the ``n`` most similar candidates per row."""
    from fedcl.core import encoder_forward

    def piece(params: EncoderParams) -> tuple:
        z = encoder_forward(params, x)
        sims = z @ candidates.T
        return tuple(tuple(sorted(row)) for row in np.argsort(-sims, axis=1, kind="stable")[:, :n])

    return piece


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Infinity-norm relative error: max |a - n| / max |n|."""
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def softmax_by_hand(scores):
    import math

    exps = [math.exp(s) for s in scores]
    total = sum(exps)
    return [e / total for e in exps]
