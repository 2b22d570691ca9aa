"""Contrastive, fused-negative and neighborhood-matching losses.

Every batched loss also returns its gradient with respect to the query
features; keys, bank entries and neighbor candidates are constants.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ContrastConfig:
    tau: float = 0.1
    exclude_local: bool = False

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


@dataclass(frozen=True)
class NeighborConfig:
    num_neighbors: int = 2
    tau_nm: float = 0.1
    candidate_count: int = 128
    lam: float = 1.0

    def __post_init__(self) -> None:
        if self.num_neighbors < 1:
            raise ValueError("need at least one neighbor")
        if self.num_neighbors > self.candidate_count:
            raise ValueError("num_neighbors cannot exceed candidate_count")
        if self.tau_nm <= 0:
            raise ValueError(f"tau_nm must be positive, got {self.tau_nm}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    contrast: float
    neigh: float
    total: float
    candidates_used: int = 0


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):  # an all -inf row yields -inf
        out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _as2d(a, d: int | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, d) if (a.size == 0 and d) else a[None, :]
    return a


def infonce(q: np.ndarray, k_plus: np.ndarray, negatives: np.ndarray, tau: float) -> float:
    """Single-query InfoNCE; zero when there are no negatives."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    q = np.asarray(q, dtype=np.float64)
    negs = _as2d(negatives, q.size).reshape(-1, q.size)
    logits = np.concatenate([[q @ np.asarray(k_plus, dtype=np.float64)], negs @ q]) / tau
    return float(_logsumexp(logits) - logits[0])


def _negatives(local_bank: np.ndarray, remote_bank: np.ndarray, exclude_local: bool, d: int) -> np.ndarray:
    local = np.asarray(local_bank, dtype=np.float64).reshape(-1, d)
    remote = np.asarray(remote_bank, dtype=np.float64).reshape(-1, d)
    return remote if exclude_local else np.concatenate([local, remote])


def fused_contrastive(q, k_plus, local_bank, remote_bank, cfg: ContrastConfig) -> float:
    q = np.asarray(q, dtype=np.float64)
    return infonce(q, k_plus, _negatives(local_bank, remote_bank, cfg.exclude_local, q.size), cfg.tau)


def contrastive_with_grad(queries: np.ndarray, keys: np.ndarray, negatives: np.ndarray, tau: float):
    """Mean InfoNCE over the batch and its gradient w.r.t. ``queries``."""
    Q = np.asarray(queries, dtype=np.float64)
    K = np.asarray(keys, dtype=np.float64)
    N = np.asarray(negatives, dtype=np.float64).reshape(-1, Q.shape[1])
    b = Q.shape[0]
    logits = np.concatenate([np.sum(Q * K, axis=1, keepdims=True), Q @ N.T], axis=1) / tau
    lse = _logsumexp(logits, axis=1)
    per_sample = lse - logits[:, 0]
    prob = np.exp(logits - lse[:, None])
    # d l_i / d q_i = (sum_j p_ij v_j - k_i) / tau
    grad = (prob[:, :1] * K + prob[:, 1:] @ N - K) / (tau * b)
    return float(per_sample.mean()), per_sample, grad


def batch_contrastive(queries, keys, local_bank, remote_bank, cfg: ContrastConfig) -> float:
    """Mean fused loss over a mini-batch; queries come from f_q, keys from f_k."""
    Q = np.asarray(queries, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] == 0:
        raise ValueError("batch must contain at least one query")
    negs = _negatives(local_bank, remote_bank, cfg.exclude_local, Q.shape[1])
    return contrastive_with_grad(Q, keys, negs, cfg.tau)[0]


def sample_candidates(remote_bank: np.ndarray, local_bank: np.ndarray, candidate_count: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Uniform draw without replacement from the union (remote rows first, then local)."""
    pool = np.concatenate([np.asarray(remote_bank, dtype=np.float32).reshape(-1, _dim(remote_bank, local_bank)),
                           np.asarray(local_bank, dtype=np.float32).reshape(-1, _dim(remote_bank, local_bank))])
    if pool.shape[0] <= candidate_count:
        if pool.shape[0] < candidate_count:
            warnings.warn(f"only {pool.shape[0]} neighbor candidates available (< {candidate_count}); "
                          "using all of them", stacklevel=2)
        return pool
    idx = rng.choice(pool.shape[0], size=candidate_count, replace=False)
    return pool[idx]


def _dim(*arrays) -> int:
    for a in arrays:
        a = np.asarray(a)
        if a.ndim == 2:
            return a.shape[1]
    raise ValueError("cannot infer feature dimension from empty banks")


def _cosine(q: np.ndarray, cands: np.ndarray) -> np.ndarray:
    qn = q / (np.linalg.norm(q, axis=-1, keepdims=True) + 1e-12)
    cn = cands / (np.linalg.norm(cands, axis=-1, keepdims=True) + 1e-12)
    return qn @ cn.T


def top_n_neighbors(q_i: np.ndarray, candidates: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` most cosine-similar candidates; ties go to the lower index."""
    cands = np.asarray(candidates, dtype=np.float64)
    if cands.shape[0] < n:
        raise ValueError(f"need at least {n} candidates, got {cands.shape[0]}")
    sims = _cosine(np.asarray(q_i, dtype=np.float64), cands)
    return np.argsort(-sims, kind="stable")[:n]


def build_lj(j: int, num_candidates: int, neighbors: np.ndarray) -> np.ndarray:
    """Index set {j} followed by every candidate that is not a top-N neighbor."""
    neighbors = np.asarray(neighbors)
    if j not in neighbors:
        raise ValueError(f"candidate {j} is not one of the selected neighbors")
    rest = np.setdiff1d(np.arange(num_candidates), neighbors)
    return np.concatenate([[j], rest]).astype(np.int64)


def matching_distribution(q_i: np.ndarray, lj_features: np.ndarray, tau_nm: float) -> np.ndarray:
    if tau_nm <= 0:
        raise ValueError(f"tau_nm must be positive, got {tau_nm}")
    feats = np.asarray(lj_features, dtype=np.float64)
    if feats.shape[0] == 0:
        raise ValueError("L_j is empty")
    s = feats @ np.asarray(q_i, dtype=np.float64) / tau_nm
    return np.exp(s - _logsumexp(s))


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def neighborhood_with_grad(queries: np.ndarray, candidates: np.ndarray, num_neighbors: int, tau_nm: float):
    """Mean matching entropy over batch and neighbors, and its gradient w.r.t. queries."""
    Q = np.asarray(queries, dtype=np.float64)
    C = np.asarray(candidates, dtype=np.float64)
    b, K = Q.shape[0], C.shape[0]
    N = num_neighbors
    if K < N:
        raise ValueError(f"need at least {N} candidates, got {K}")
    top = np.argsort(-_cosine(Q, C), axis=1, kind="stable")[:, :N]  # (b, N)
    S = Q @ C.T / tau_nm  # (b, K)
    rows = np.arange(b)[:, None]
    is_top = np.zeros((b, K), dtype=bool)
    is_top[rows, top] = True

    s_top = S[rows, top]  # (b, N)
    s_rest = np.where(is_top, -np.inf, S)  # (b, K)
    lse = np.logaddexp(s_top, _logsumexp(s_rest, axis=1)[:, None])  # (b, N)
    logp_top = s_top - lse
    p_top = np.exp(logp_top)
    rest_mask = ~is_top[:, None, :]  # (b, 1, K)
    logp_rest = np.where(rest_mask, s_rest[:, None, :] - lse[:, :, None], 0.0)  # (b, N, K)
    p_rest = np.where(rest_mask, np.exp(logp_rest), 0.0)
    H = -(p_top * logp_top + np.sum(p_rest * logp_rest, axis=2))  # (b, N)

    # dH/ds_a = -p_a (log p_a + H)
    g_top = -p_top * (logp_top + H)
    g_rest = -p_rest * (logp_rest + H[:, :, None])
    dS = g_rest.sum(axis=1)
    np.add.at(dS, (np.broadcast_to(rows, top.shape), top), g_top)
    grad = dS @ C / (tau_nm * b * N)
    return float(H.mean()), grad


def neighborhood_loss(batch_queries: np.ndarray, candidates: np.ndarray, cfg: NeighborConfig) -> float:
    return neighborhood_with_grad(_as2d(batch_queries), candidates, cfg.num_neighbors, cfg.tau_nm)[0]


def total_loss_with_grad(queries, keys, local_bank, remote_bank, ccfg: ContrastConfig,
                         ncfg: NeighborConfig | None = None, rng: np.random.Generator | None = None,
                         candidates: np.ndarray | None = None):
    """Combined objective contrast + lambda * neigh; ``ncfg=None`` disables matching.

    Candidates are drawn once for the whole mini-batch unless supplied.
    """
    Q = np.asarray(queries, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] == 0:
        raise ValueError("batch must contain at least one query")
    d = Q.shape[1]
    negs = _negatives(local_bank, remote_bank, ccfg.exclude_local, d)
    contrast, _, grad = contrastive_with_grad(Q, keys, negs, ccfg.tau)
    neigh, used = 0.0, 0
    if ncfg is not None:
        if candidates is None:
            if rng is None:
                raise ValueError("sampling neighbor candidates needs an rng")
            candidates = sample_candidates(np.asarray(remote_bank).reshape(-1, d),
                                           np.asarray(local_bank).reshape(-1, d), ncfg.candidate_count, rng)
        used = candidates.shape[0]
        n_eff = min(ncfg.num_neighbors, used)
        if n_eff >= 1:
            neigh, g_neigh = neighborhood_with_grad(Q, candidates, n_eff, ncfg.tau_nm)
            if ncfg.lam != 0:
                grad = grad + ncfg.lam * g_neigh
    lam = ncfg.lam if ncfg is not None else 0.0
    total = contrast + lam * neigh if lam else contrast
    return LossBreakdown(contrast, neigh, total, used), grad


def total_loss(queries, keys, local_bank, remote_bank, ccfg: ContrastConfig,
               ncfg: NeighborConfig | None = None, rng: np.random.Generator | None = None,
               candidates: np.ndarray | None = None) -> LossBreakdown:
    return total_loss_with_grad(queries, keys, local_bank, remote_bank, ccfg, ncfg, rng, candidates)[0]
