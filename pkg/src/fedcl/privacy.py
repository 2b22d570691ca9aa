"""InstaHide-style sample encryption used before computing uploaded features.

This is the simplified local-mixup variant: each encrypted sample mixes a
primary sample with ``k_mix - 1`` other local samples and flips coordinate
signs with a random mask. No security claim is attached to it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EncoderParams, encoder_forward

PER_COORDINATE = "per_coordinate"
OFF = "off"


@dataclass(frozen=True)
class EncryptionSpec:
    k_mix: int = 2
    lambda_floor: float = 0.25
    sign_mask_mode: str = PER_COORDINATE

    def __post_init__(self) -> None:
        if self.k_mix < 1:
            raise ValueError("k_mix must be >= 1")
        if not 0.0 <= self.lambda_floor <= 1.0 / self.k_mix:
            raise ValueError(f"lambda_floor must lie in [0, 1/k_mix], got {self.lambda_floor}")
        if self.sign_mask_mode not in (PER_COORDINATE, OFF):
            raise ValueError(f"unknown sign mask mode {self.sign_mask_mode!r}")


IDENTITY = EncryptionSpec(k_mix=1, lambda_floor=0.0, sign_mask_mode=OFF)


def mixing_weights(k_mix: int, lambda_floor: float, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet(1, ..., 1) draw, clipped at ``lambda_floor`` and renormalized."""
    if k_mix == 1:
        return np.ones(1)
    lam = rng.dirichlet(np.ones(k_mix))
    lam = np.maximum(lam, lambda_floor)
    return lam / lam.sum()


def instahide_encrypt(x: np.ndarray, mixin_pool: np.ndarray, spec: EncryptionSpec,
                      rng: np.random.Generator, weights: np.ndarray | None = None) -> np.ndarray:
    """Encrypt one sample; ``mixin_pool`` holds other local samples (rows)."""
    x = np.asarray(x, dtype=np.float64)
    pool = np.asarray(mixin_pool, dtype=np.float64).reshape(-1, x.size)
    if pool.shape[0] < spec.k_mix - 1:
        raise ValueError(f"mixin pool has {pool.shape[0]} samples, need {spec.k_mix - 1}")
    picks = rng.choice(pool.shape[0], size=spec.k_mix - 1, replace=False) if spec.k_mix > 1 else []
    members = np.vstack([x[None, :], pool[picks]])
    lam = mixing_weights(spec.k_mix, spec.lambda_floor, rng) if weights is None else np.asarray(weights, float)
    mixed = lam @ members
    if spec.sign_mask_mode == PER_COORDINATE:
        mixed = mixed * rng.choice(np.array([-1.0, 1.0]), size=x.size)
    return mixed


def encrypt_rows(x: np.ndarray, primaries: np.ndarray, spec: EncryptionSpec,
                 rng: np.random.Generator) -> np.ndarray:
    """Encrypt ``x[primaries]``, mixing each with other rows of ``x``."""
    n = x.shape[0]
    out = np.empty((len(primaries), x.shape[1]))
    for row, i in enumerate(primaries):
        if spec.k_mix > 1:
            others = np.delete(np.arange(n), i)
            pool = x[others]
        else:
            pool = x[:0]
        out[row] = instahide_encrypt(x[i], pool, spec, rng)
    return out


def encrypted_feature_batch(params_k: EncoderParams, x: np.ndarray, count: int, spec: EncryptionSpec,
                            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Features f_k(x_tilde) for ``count`` encrypted local samples.

    Returns (features float32, primary sample indices). The indices exist only
    so analytics can attach labels; encryption itself never sees labels.
    """
    n = x.shape[0]
    if n < spec.k_mix:
        raise ValueError(f"client holds {n} samples, need at least k_mix={spec.k_mix}")
    primaries = rng.choice(n, size=count, replace=count > n)
    x_tilde = encrypt_rows(x, primaries, spec, rng)
    return encoder_forward(params_k, x_tilde).astype(np.float32), primaries
