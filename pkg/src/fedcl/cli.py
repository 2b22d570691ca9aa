"""Command-line entry point: ``fedcl <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .analytics import MetricsValidationError, emit_metrics, validate_metrics
from .config import MODES, ConfigError, ExperimentConfig, dump_config, load_config
from .core import EncoderParams, NonFiniteLossError
from .data import ClientShard, DatasetFormatError, PartitionError, load_dataset, save_dataset, shard_as_dataset
from .federation import ClientRoundError, build_environment, run_experiment
from .transport import ProtocolError, RoundAborted, client_session, server_loop

log = logging.getLogger("fedcl")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PROTOCOL = 0, 1, 2, 3


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if getattr(args, "rounds", None) is not None:
        overrides["rounds"] = args.rounds
    return cfg.replace(experiment=overrides) if overrides else cfg


def _out_dir(args: argparse.Namespace, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.output.dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    return out


def _environment(cfg: ExperimentConfig):
    train = load_dataset(cfg.output.dataset) if cfg.output.dataset else None
    return build_environment(cfg, train)


def save_model(path: Path, params_q: EncoderParams, params_k: EncoderParams) -> None:
    arrays = {}
    for name, params in (("q", params_q), ("k", params_k)):
        for i, (w, b) in enumerate(params.layers):
            arrays[f"{name}_w{i}"] = w
            arrays[f"{name}_b{i}"] = b
    np.savez(path, **arrays)


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    env = build_environment(cfg)
    save_dataset(env.train, out / "dataset.fcld")
    for shard in env.shards:
        save_dataset(shard_as_dataset(shard, cfg.data.num_classes), out / f"shard_{shard.client_id}.fcld")
    print(f"wrote {len(env.train)} rows to {out / 'dataset.fcld'} and {len(env.shards)} shard files")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    result = run_experiment(cfg, _environment(cfg))
    csv_path, _ = emit_metrics(result.reports, out / "metrics")
    save_model(out / "model.npz", result.params_q, result.params_k)
    (out / "config.ini").write_text(dump_config(cfg))
    print(f"mode={cfg.experiment.mode} rounds={len(result.reports)} "
          f"knn {result.baseline.knn_accuracy:.4f} -> {result.final.knn_accuracy:.4f} "
          f"linear {result.baseline.linear_accuracy:.4f} -> {result.final.linear_accuracy:.4f}")
    print(f"metrics: {csv_path}")
    return EXIT_OK


def ablation_table(cfg: ExperimentConfig, repeats: int) -> list[dict]:
    """Final probe accuracies per mode, seeds shared across modes."""
    base_seed = cfg.experiment.seed
    rows = []
    for mode in MODES:
        knn, lin = [], []
        for r in range(repeats):
            run_cfg = cfg.replace(experiment={"mode": mode, "seed": base_seed + r})
            result = run_experiment(run_cfg)
            knn.append(result.final.knn_accuracy)
            lin.append(result.final.linear_accuracy)
            log.info("ablate mode=%s seed=%d knn=%.4f", mode, base_seed + r, knn[-1])
        rows.append({"mode": mode, "knn": knn, "linear": lin,
                     "knn_mean": float(np.mean(knn)), "knn_std": float(np.std(knn)),
                     "linear_mean": float(np.mean(lin)), "linear_std": float(np.std(lin))})
    ref = rows[0]["knn_mean"]
    for row in rows:
        row["knn_delta"] = row["knn_mean"] - ref
    return rows


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    rows = ablation_table(cfg, args.repeats)
    lines = ["mode,knn_mean,knn_std,knn_delta,linear_mean,linear_std"]
    lines += [f"{r['mode']},{r['knn_mean']:.6f},{r['knn_std']:.6f},{r['knn_delta']:+.6f},"
              f"{r['linear_mean']:.6f},{r['linear_std']:.6f}" for r in rows]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    print(f"{'mode':<10} {'knn mean':>9} {'std':>7} {'delta':>8} {'linear':>8} {'std':>7}")
    for r in rows:
        print(f"{r['mode']:<10} {r['knn_mean']:9.4f} {r['knn_std']:7.4f} {r['knn_delta']:+8.4f} "
              f"{r['linear_mean']:8.4f} {r['linear_std']:7.4f}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)

    def listening(addr):
        print(f"listening on {addr[0]}:{addr[1]}", flush=True)

    result = server_loop(args.host, args.port, cfg, _environment(cfg), on_listening=listening)
    emit_metrics(result.reports, out / "metrics")
    save_model(out / "model.npz", result.params_q, result.params_k)
    print(f"served {len(result.reports)} rounds; final knn {result.final.knn_accuracy:.4f}")
    return EXIT_OK


def _load_shard(cfg: ExperimentConfig, client_id: int, path: str | None) -> ClientShard:
    if path is None:
        return _environment(cfg).shards[client_id]
    data = load_dataset(path)
    return ClientShard(client_id, np.arange(len(data)), data.x, data.labels,
                       frozenset(int(v) for v in np.unique(data.labels)))


def cmd_client(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if not 0 <= args.client_id < cfg.experiment.clients:
        raise ConfigError(f"--client-id must lie in [0, {cfg.experiment.clients})")
    shard = _load_shard(cfg, args.client_id, args.shard)
    rounds = client_session(args.host, args.port, cfg, shard)
    print(f"client {args.client_id} finished after {rounds} rounds")
    return EXIT_OK


def cmd_validate_metrics(args: argparse.Namespace) -> int:
    rows = validate_metrics(args.path, args.rows)
    print(f"{args.path}: {rows} valid rows")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcl", description="Federated contrastive learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="experiment config file (INI)")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--mode", choices=MODES, help="override experiment.mode")
        p.add_argument("--rounds", type=int, help="override experiment.rounds")
        if out:
            p.add_argument("--out", help="output directory (default: output.dir)")

    p = sub.add_parser("generate", help="write the synthetic dataset and client shards")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", help="run an in-process experiment")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ablate", help="compare cl, cl_ff and cl_ff_nm over several seeds")
    common(p)
    p.add_argument("--repeats", type=int, default=3, help="seeds per mode (default 3)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="run the server side over TCP")
    common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7878)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="run one client over TCP")
    common(p, out=False)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7878)
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--shard", help="FCLD shard file (default: derive from config)")
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("validate-metrics", help="check a metrics CSV")
    p.add_argument("path")
    p.add_argument("--rows", type=int, help="expected number of rows")
    p.set_defaults(func=cmd_validate_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "repeats", 1) < 1:
        print("error: --repeats must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except (ConfigError, MetricsValidationError, PartitionError, DatasetFormatError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ProtocolError as exc:
        print(f"protocol error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except RoundAborted as exc:
        code = EXIT_PROTOCOL if isinstance(exc.cause, ProtocolError) else EXIT_RUNTIME
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (OSError, ClientRoundError, NonFiniteLossError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
