"""Round protocol: upload, aggregate, download, local learning.

The :class:`Server` and :func:`client_local_update` hold all protocol logic and
do no I/O, so the in-process simulator here and the socket deployment in
:mod:`fedcl.transport` run exactly the same arithmetic.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import analytics
from .bank import ENCRYPTED_LOCAL, LOCAL, MemoryBank, RemoteBankSet, assemble_remote
from .config import ExperimentConfig
from .core import EncoderParams, NonFiniteLossError, encoder_forward, init_encoder, loss_backward, \
    momentum_update, sgd_step
from .data import ClientShard, Dataset, augment, class_directions, generate_gaussian_mixture, partition
from .objective import ContrastConfig, NeighborConfig, total_loss_with_grad
from .privacy import EncryptionSpec, encrypted_feature_batch

log = logging.getLogger(__name__)

# rng stream tags; every stream is keyed by (master_seed, tag, ...)
_DATA, _TEST, _PARTITION, _INIT, _SERVER, _CLIENT, _PROBE, _ANALYTICS = range(8)


def stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


class ClientRoundError(RuntimeError):
    def __init__(self, client_id: int, round_index: int, cause: Exception):
        super().__init__(f"client {client_id} aborted round {round_index}: {cause}")
        self.client_id = client_id
        self.round_index = round_index
        self.cause = cause


@dataclass(frozen=True)
class RoundConfig:
    beta: float = 1.0
    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 0.05
    weight_decay: float = 1e-4
    momentum: float = 0.99
    mode: str = "cl_ff_nm"

    def __post_init__(self) -> None:
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> RoundConfig:
        e = cfg.experiment
        return cls(e.beta, e.local_epochs, e.batch_size, e.lr, e.weight_decay, e.momentum, e.mode)


@dataclass(frozen=True)
class Environment:
    """Everything derivable from the config alone: data, shards, initial model."""

    cfg: ExperimentConfig
    train: Dataset
    test: Dataset
    shards: list[ClientShard]
    init_q: EncoderParams
    init_k: EncoderParams


def encoder_dims(cfg: ExperimentConfig) -> list[int]:
    return [cfg.data.dim, *cfg.model.hidden, cfg.model.feature_dim]


def initial_params(cfg: ExperimentConfig) -> tuple[EncoderParams, EncoderParams]:
    q = init_encoder(encoder_dims(cfg), stream(cfg.experiment.seed, _INIT))
    return q, q.copy()


def build_environment(cfg: ExperimentConfig, train: Dataset | None = None) -> Environment:
    d, seed = cfg.data, cfg.experiment.seed
    directions = class_directions(d.num_classes, d.dim, stream(seed, _DATA, 1))
    if train is None:
        train = generate_gaussian_mixture(d.num_classes, d.per_class_n, d.dim, d.separation, d.noise_sigma,
                                          seed=int(stream(seed, _DATA).integers(2**63)), directions=directions)
    test = generate_gaussian_mixture(d.num_classes, d.test_per_class, d.dim, d.separation, d.noise_sigma,
                                     seed=int(stream(seed, _TEST).integers(2**63)), directions=directions)
    shards = partition(train, cfg.experiment.clients, d.partition, d.classes_per_client,
                       seed=int(stream(seed, _PARTITION).integers(2**63)))
    q, k = initial_params(cfg)
    return Environment(cfg, train, test, shards, q, k)


@dataclass
class ClientState:
    client_id: int
    shard: ClientShard
    params_q: EncoderParams
    params_k: EncoderParams
    local_bank: MemoryBank
    upload_bank: MemoryBank
    remote_bank: RemoteBankSet
    num_classes: int


def make_client(cfg: ExperimentConfig, shard: ClientShard, init_q: EncoderParams,
                init_k: EncoderParams) -> ClientState:
    """Fresh client whose local queue is pre-filled with f_k keys of its own samples."""
    d = cfg.model.feature_dim
    local = MemoryBank(cfg.bank.capacity, d, LOCAL)
    rng = stream(cfg.experiment.seed, _CLIENT, shard.client_id, 0)
    idx = rng.choice(len(shard), size=cfg.bank.capacity, replace=cfg.bank.capacity > len(shard))
    views = augment(shard.x[idx], cfg.data.aug_sigma, cfg.data.drop_prob, rng)
    local.enqueue(encoder_forward(init_k, views).astype(np.float32), shard.labels[idx])
    return ClientState(
        client_id=shard.client_id,
        shard=shard,
        params_q=init_q.copy(),
        params_k=init_k.copy(),
        local_bank=local,
        upload_bank=MemoryBank(cfg.bank.upload_size, d, ENCRYPTED_LOCAL),
        remote_bank=RemoteBankSet(shard.client_id, {}, d),
        num_classes=cfg.data.num_classes,
    )


@dataclass(frozen=True)
class ClientMetrics:
    """What a client reports after local learning (ROUND_DONE on the wire).

    The label histograms are the analytics side channel used for FN ratios.
    """

    contrast: float
    neigh: float
    total: float
    steps: int
    epoch_losses: tuple[float, ...]
    query_hist: tuple[int, ...]
    local_hist: tuple[int, ...]
    upload_hist: tuple[int, ...]
    shard_hist: tuple[int, ...]


@dataclass(frozen=True)
class ClientUpdate:
    params_q: EncoderParams
    params_k: EncoderParams
    upload: np.ndarray
    metrics: ClientMetrics


def objective_configs(cfg: ExperimentConfig) -> tuple[ContrastConfig, NeighborConfig | None]:
    mode = cfg.experiment.mode
    ccfg = ContrastConfig(cfg.contrast.tau, cfg.contrast.exclude_local and mode != "cl")
    ncfg = None
    if mode == "cl_ff_nm":
        n = cfg.neighbor
        ncfg = NeighborConfig(n.num_neighbors, n.tau_nm, n.candidates, n.lam)
    return ccfg, ncfg


def encryption_spec(cfg: ExperimentConfig) -> EncryptionSpec:
    p = cfg.privacy
    return EncryptionSpec(p.k_mix, p.lambda_floor, p.sign_mask)


def client_local_update(client: ClientState, global_q: EncoderParams, global_k: EncoderParams,
                        remote_bank: RemoteBankSet, cfg: ExperimentConfig, round_index: int,
                        upload: bool = True) -> ClientUpdate:
    """Run E local epochs from the downloaded globals and refresh the upload buffer."""
    rc = RoundConfig.from_config(cfg)
    ccfg, ncfg = objective_configs(cfg)
    seed = cfg.experiment.seed
    rng = stream(seed, _CLIENT, client.client_id, round_index + 1)
    shard = client.shard
    n = len(shard)
    if n == 0:
        raise ClientRoundError(client.client_id, round_index, ValueError("empty shard"))

    params_q = global_q.astype(np.float32)
    params_k = global_k.astype(np.float32)
    client.remote_bank = remote_bank
    remote = remote_bank.features if rc.mode != "cl" else np.zeros((0, params_q.output_dim), np.float32)

    step_losses: list[tuple[float, float, float]] = []
    epoch_losses = []
    for _ in range(rc.local_epochs):
        order = rng.permutation(n)
        epoch = []
        for start in range(0, n, rc.batch_size):
            idx = order[start:start + rc.batch_size]
            view_a = augment(shard.x[idx], cfg.data.aug_sigma, cfg.data.drop_prob, rng)
            view_b = augment(shard.x[idx], cfg.data.aug_sigma, cfg.data.drop_prob, rng)
            keys = encoder_forward(params_k, view_b)
            local = client.local_bank.features

            def loss_fn(z, keys=keys, local=local):
                return total_loss_with_grad(z, keys, local, remote, ccfg, ncfg, rng)

            try:
                loss, grads = loss_backward(params_q, view_a, loss_fn)
            except NonFiniteLossError as exc:
                raise ClientRoundError(client.client_id, round_index, exc) from exc
            params_q = sgd_step(params_q, grads, rc.lr, rc.weight_decay)
            params_k = momentum_update(params_k, params_q, rc.momentum)
            client.local_bank.enqueue(keys.astype(np.float32), shard.labels[idx])
            step_losses.append((loss.contrast, loss.neigh, loss.total))
            epoch.append(loss.total)
        epoch_losses.append(float(np.mean(epoch)))

    if not (params_q.is_finite() and params_k.is_finite()):
        raise ClientRoundError(client.client_id, round_index, FloatingPointError("non-finite parameters"))
    client.params_q, client.params_k = params_q, params_k

    if upload:
        feats, primaries = encrypted_feature_batch(params_k, shard.x, cfg.bank.upload_size,
                                                   encryption_spec(cfg), rng)
        client.upload_bank.replace(feats, shard.labels[primaries])

    M = client.num_classes
    arng = stream(seed, _ANALYTICS, client.client_id, round_index)
    queries = shard.labels[arng.choice(n, size=cfg.probe.fn_queries, replace=cfg.probe.fn_queries > n)]
    sl = np.asarray(step_losses)
    metrics = ClientMetrics(
        contrast=float(sl[:, 0].mean()),
        neigh=float(sl[:, 1].mean()),
        total=float(sl[:, 2].mean()),
        steps=len(step_losses),
        epoch_losses=tuple(epoch_losses),
        query_hist=tuple(int(v) for v in np.bincount(queries, minlength=M)),
        local_hist=tuple(int(v) for v in client.local_bank.label_histogram(M)),
        upload_hist=tuple(int(v) for v in client.upload_bank.label_histogram(M)),
        shard_hist=tuple(int(v) for v in np.bincount(shard.labels, minlength=M)),
    )
    return ClientUpdate(params_q, params_k, client.upload_bank.features, metrics)


def select_clients(num_clients: int, beta: float, rng: np.random.Generator) -> list[int]:
    """Uniform subset of size ceil(beta * C), returned sorted."""
    count = max(1, math.ceil(beta * num_clients - 1e-9))
    if count >= num_clients:
        return list(range(num_clients))
    return sorted(int(c) for c in rng.choice(num_clients, size=count, replace=False))


def aggregation_weights(sizes: Sequence[float]) -> np.ndarray:
    s = np.asarray(sizes, dtype=np.float64)
    if np.any(s <= 0) or s.sum() <= 0:
        raise ValueError("data sizes must be positive")
    return s / s.sum()


def aggregate_models(models: Sequence[tuple[EncoderParams, float]]) -> EncoderParams:
    """Data-size weighted mean, accumulated in float64 and stored as float32."""
    if not models:
        raise ValueError("nothing to aggregate")
    shapes = models[0][0].shapes
    for p, _ in models[1:]:
        if p.shapes != shapes:
            raise ValueError(f"shape mismatch: {p.shapes} vs {shapes}")
    w = aggregation_weights([s for _, s in models])
    layers = []
    for li in range(len(shapes)):
        pair = []
        for ai in range(2):
            acc = np.zeros(models[0][0].layers[li][ai].shape, dtype=np.float64)
            for wi, (p, _) in zip(w, models):
                acc += wi * np.asarray(p.layers[li][ai], dtype=np.float64)
            pair.append(acc.astype(np.float32))
        layers.append(tuple(pair))
    return EncoderParams(layers)


@dataclass
class RoundReport:
    round: int
    mode: str
    selected: tuple[int, ...]
    events: tuple[str, ...]
    upload_counts: dict[int, int]
    aggregate_digest: str
    download_counts: dict[int, int]
    contrast_loss: float
    neigh_loss: float
    total_loss: float
    fn: analytics.FnRatioReport
    knn_accuracy: float
    linear_accuracy: float
    client_metrics: dict[int, ClientMetrics] = field(default_factory=dict)
    wall_time: float = 0.0

    def metrics_row(self) -> dict:
        return {
            "round": self.round,
            "mode": self.mode,
            "contrast_loss": self.contrast_loss,
            "neigh_loss": self.neigh_loss,
            "total_loss": self.total_loss,
            "fn_local_only": self.fn.empirical_local_only,
            "fn_fused": self.fn.empirical_fused,
            "fn_remote_only": self.fn.empirical_remote_only,
            "fn_theory_fused": self.fn.theoretical_fused,
            "fn_theory_remote": self.fn.theoretical_remote_only,
            "knn_accuracy": self.knn_accuracy,
            "linear_accuracy": self.linear_accuracy,
            "wall_time": self.wall_time,
        }

    def comparable(self) -> dict:
        """Everything except timing, for equivalence/determinism checks."""
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return d


class Server:
    """Server-side protocol state (ServerState) and the per-round barrier logic."""

    def __init__(self, cfg: ExperimentConfig, env: Environment, shard_sizes: dict[int, int]):
        self.cfg = cfg
        self.env = env
        self.params_q = env.init_q.astype(np.float32)
        self.params_k = env.init_k.astype(np.float32)
        self.shard_sizes = dict(shard_sizes)
        self.round_index = 0
        self.combined_features: dict[int, np.ndarray] = {}
        self._combined_hist: dict[int, np.ndarray] = {}
        self._pending_hist: dict[int, np.ndarray] = {}
        self._shard_hist: dict[int, np.ndarray] = {}
        self._uploads: dict[int, tuple[EncoderParams, EncoderParams]] = {}
        self._events: list[str] = []

    def select(self, round_index: int) -> list[int]:
        return select_clients(self.cfg.experiment.clients, self.cfg.experiment.beta,
                              stream(self.cfg.experiment.seed, _SERVER, round_index))

    def receive_upload(self, cid: int, params_q: EncoderParams, params_k: EncoderParams,
                       features: np.ndarray) -> None:
        self._uploads[cid] = (params_q, params_k)
        if features.shape[0]:
            self.combined_features[cid] = np.array(features, dtype=np.float32)
            self._combined_hist[cid] = self._pending_hist.get(cid, np.zeros(self.cfg.data.num_classes, np.int64))
        self._events.append(f"upload:{cid}:{features.shape[0]}")

    def aggregate(self) -> str:
        ids = sorted(self._uploads)
        self.params_q = aggregate_models([(self._uploads[c][0], self.shard_sizes[c]) for c in ids])
        self.params_k = aggregate_models([(self._uploads[c][1], self.shard_sizes[c]) for c in ids])
        self._uploads.clear()
        digest = self.params_q.digest()[:16] + self.params_k.digest()[:16]
        self._events.append(f"aggregate:{digest}")
        return digest

    def remote_for(self, cid: int) -> RemoteBankSet:
        remote = assemble_remote(self.combined_features, cid, self.cfg.model.feature_dim)
        self._events.append(f"download:{cid}:{len(remote)}")
        return remote

    def probe(self, params_q: EncoderParams | None = None) -> analytics.ProbeReport:
        params = self.params_q if params_q is None else params_q
        env, pc = self.env, self.cfg.probe
        M = self.cfg.data.num_classes
        knn = analytics.knn_probe(params, env.train.x, env.train.labels, env.test.x, env.test.labels,
                                  pc.knn_k, M)
        lin = analytics.linear_probe(params, env.train.x, env.train.labels, env.test.x, env.test.labels,
                                     pc.linear_epochs, pc.linear_lr, pc.linear_batch,
                                     seed=int(stream(self.cfg.experiment.seed, _PROBE).integers(2**63)),
                                     num_classes=M)
        return analytics.ProbeReport(knn, lin, self.params_q.digest()[:16])

    def _fn_report(self, metrics: dict[int, ClientMetrics]) -> analytics.FnRatioReport:
        per_client = {}
        for cid, m in metrics.items():
            q = np.asarray(m.query_hist, dtype=np.float64)
            local = np.asarray(m.local_hist, dtype=np.float64)
            others = [c for c in sorted(self.combined_features) if c != cid]
            remote = sum((self._combined_hist[c] for c in others), np.zeros_like(local))
            sizes = [self.combined_features[c].shape[0] for c in others]
            classes = np.flatnonzero(np.asarray(m.shard_hist) > 0)
            mcls = len(classes)
            row = {
                "local_only": analytics.fn_ratio_from_histograms(q, local),
                "fused": analytics.fn_ratio_from_histograms(q, local + remote),
                "remote_only": analytics.fn_ratio_from_histograms(q, remote) if remote.sum() else 0.0,
            }
            qw = q / q.sum()
            theory_f = theory_r = 0.0
            for y in np.flatnonzero(qw):
                ind = [int(self._shard_hist[c][y] > 0) if c in self._shard_hist else 0 for c in others]
                theory_f += qw[y] * analytics.theoretical_fn_ratio_fused(mcls, float(local.sum()), sizes, ind)
                if sizes:
                    theory_r += qw[y] * analytics.theoretical_fn_ratio_remote(mcls, sizes, ind)
            row["theory_fused"] = float(theory_f)
            row["theory_remote"] = float(theory_r)
            per_client[cid] = row
        mean = {k: float(np.mean([r[k] for r in per_client.values()])) for k in next(iter(per_client.values()))}
        return analytics.FnRatioReport(mean["local_only"], mean["fused"], mean["remote_only"],
                                       mean["theory_fused"], mean["theory_remote"], per_client)

    def complete_round(self, round_index: int, selected: Sequence[int], probe: analytics.ProbeReport,
                       metrics: dict[int, ClientMetrics], wall_time: float) -> RoundReport:
        for cid, m in metrics.items():
            self._events.append(f"done:{cid}")
            self._shard_hist[cid] = np.asarray(m.shard_hist, dtype=np.int64)
        fn = self._fn_report(metrics)
        # histograms describe the features each client uploads next round
        for cid, m in metrics.items():
            self._pending_hist[cid] = np.asarray(m.upload_hist, dtype=np.int64)
        events = tuple(self._events)
        self._events.clear()
        ordered = [metrics[c] for c in sorted(metrics)]
        report = RoundReport(
            round=round_index,
            mode=self.cfg.experiment.mode,
            selected=tuple(selected),
            events=events,
            upload_counts={int(e.split(":")[1]): int(e.split(":")[2]) for e in events if e.startswith("upload:")},
            aggregate_digest=next(e.split(":")[1] for e in events if e.startswith("aggregate:")),
            download_counts={int(e.split(":")[1]): int(e.split(":")[2]) for e in events if e.startswith("download:")},
            contrast_loss=float(np.mean([m.contrast for m in ordered])),
            neigh_loss=float(np.mean([m.neigh for m in ordered])),
            total_loss=float(np.mean([m.total for m in ordered])),
            fn=fn,
            knn_accuracy=probe.knn_accuracy,
            linear_accuracy=probe.linear_accuracy,
            client_metrics=dict(sorted(metrics.items())),
            wall_time=wall_time,
        )
        self.round_index = round_index + 1
        return report


def thread_count(default: int = 1) -> int:
    raw = os.environ.get("FEDCL_THREADS", "")
    try:
        return max(1, int(raw)) if raw else default
    except ValueError:
        return default


def run_round(server: Server, clients: dict[int, ClientState], cfg: ExperimentConfig, round_index: int,
              executor: ThreadPoolExecutor | None = None, upload_features: bool = True) -> RoundReport:
    start = time.perf_counter()
    selected = server.select(round_index)
    # step 1: upload
    for cid in selected:
        c = clients[cid]
        server.receive_upload(cid, c.params_q, c.params_k, c.upload_bank.features)
    # step 2: aggregate
    server.aggregate()
    probe = server.probe()
    # step 3: download
    remotes = {cid: server.remote_for(cid) for cid in selected}
    # step 4: local learning
    gq, gk = server.params_q, server.params_k

    def work(cid: int) -> ClientUpdate:
        return client_local_update(clients[cid], gq, gk, remotes[cid], cfg, round_index, upload_features)

    if executor is None:
        updates = {cid: work(cid) for cid in selected}
    else:
        futures = {cid: executor.submit(work, cid) for cid in selected}
        updates = {cid: futures[cid].result() for cid in selected}
    return server.complete_round(round_index, selected, probe, {c: u.metrics for c, u in updates.items()},
                                 time.perf_counter() - start)


@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    params_q: EncoderParams
    params_k: EncoderParams
    baseline: analytics.ProbeReport
    final: analytics.ProbeReport


def finalize(server: Server, clients: dict[int, ClientState], last_selected: Sequence[int]) -> None:
    """Closing upload + aggregation so the final model includes the last local updates."""
    for cid in last_selected:
        c = clients[cid]
        server.receive_upload(cid, c.params_q, c.params_k, c.upload_bank.features)
    server.aggregate()
    server._events.clear()


def run_experiment(cfg: ExperimentConfig, env: Environment | None = None, threads: int | None = None,
                   sink: Callable[[RoundReport], None] | None = None,
                   upload_features: bool = True) -> ExperimentResult:
    """Run ``cfg.experiment.rounds`` rounds; deterministic in the master seed."""
    env = env or build_environment(cfg)
    clients = {s.client_id: make_client(cfg, s, env.init_q, env.init_k) for s in env.shards}
    server = Server(cfg, env, {cid: len(c.shard) for cid, c in clients.items()})
    baseline = server.probe()
    reports: list[RoundReport] = []
    threads = thread_count() if threads is None else threads
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(cfg.experiment.rounds):
            report = run_round(server, clients, cfg, t, executor, upload_features)
            log.info("round %d mode=%s loss=%.4f knn=%.3f", t, report.mode, report.total_loss, report.knn_accuracy)
            reports.append(report)
            if sink is not None:
                sink(report)
    finally:
        if executor is not None:
            executor.shutdown()
    if reports:
        finalize(server, clients, reports[-1].selected)
        final = server.probe()
    else:
        final = baseline
    return ExperimentResult(reports, server.params_q, server.params_k, baseline, final)
