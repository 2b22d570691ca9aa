"""Experiment configuration: typed sections loaded from an INI-style file."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

MODES = ("cl", "cl_ff", "cl_ff_nm")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSection:
    rounds: int = 30
    clients: int = 5
    beta: float = 1.0
    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 0.05
    weight_decay: float = 1e-4
    momentum: float = 0.99
    mode: str = "cl_ff_nm"
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    num_classes: int = 10
    per_class_n: int = 200
    test_per_class: int = 100
    dim: int = 32
    separation: float = 4.0
    noise_sigma: float = 1.0
    aug_sigma: float = 0.5
    drop_prob: float = 0.1
    partition: str = "noniid"
    classes_per_client: int = 2


@dataclass(frozen=True)
class ModelSection:
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 16


@dataclass(frozen=True)
class BankSection:
    capacity: int = 256
    upload_size: int = 64


@dataclass(frozen=True)
class ContrastSection:
    tau: float = 0.1
    exclude_local: bool = False


@dataclass(frozen=True)
class NeighborSection:
    num_neighbors: int = 2
    tau_nm: float = 0.1
    candidates: int = 128
    lam: float = 1.0


@dataclass(frozen=True)
class PrivacySection:
    k_mix: int = 2
    lambda_floor: float = 0.25
    sign_mask: str = "per_coordinate"


@dataclass(frozen=True)
class ProbeSection:
    knn_k: int = 10
    linear_epochs: int = 30
    linear_lr: float = 0.5
    linear_batch: int = 128
    fn_queries: int = 100


@dataclass(frozen=True)
class OutputSection:
    dir: str = "runs"
    dataset: str = ""


# file key -> dataclass field, where they differ
_ALIASES = {("neighbor", "lambda"): "lam"}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    bank: BankSection = field(default_factory=BankSection)
    contrast: ContrastSection = field(default_factory=ContrastSection)
    neighbor: NeighborSection = field(default_factory=NeighborSection)
    privacy: PrivacySection = field(default_factory=PrivacySection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self) -> None:
        validate(self)

    def replace(self, **sections: dict[str, Any]) -> ExperimentConfig:
        """Copy with per-section overrides, e.g. ``cfg.replace(experiment={"rounds": 3})``."""
        changes = {name: dataclasses.replace(getattr(self, name), **vals) for name, vals in sections.items()}
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def digest(self) -> bytes:
        """SHA-256 over everything that affects training (output paths excluded)."""
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


REQUIRED_KEYS = (("experiment", "rounds"), ("experiment", "clients"), ("experiment", "mode"), ("experiment", "seed"))


def validate(cfg: ExperimentConfig) -> None:
    e, d = cfg.experiment, cfg.data
    checks = [
        (e.rounds >= 0, "experiment.rounds must be >= 0"),
        (e.clients >= 1, "experiment.clients must be >= 1"),
        (0.0 < e.beta <= 1.0, "experiment.beta must lie in (0, 1]"),
        (e.local_epochs >= 1, "experiment.local_epochs must be >= 1"),
        (e.batch_size >= 1, "experiment.batch_size must be >= 1"),
        (e.lr >= 0, "experiment.lr must be >= 0"),
        (0.0 <= e.momentum <= 1.0, "experiment.momentum must lie in [0, 1]"),
        (e.mode in MODES, f"experiment.mode must be one of {MODES}"),
        (d.num_classes >= 2, "data.num_classes must be >= 2"),
        (d.per_class_n >= 1 and d.test_per_class >= 1, "data sample counts must be positive"),
        (d.separation > 0, "data.separation must be > 0"),
        (0.0 <= d.drop_prob < 1.0, "data.drop_prob must lie in [0, 1)"),
        (d.partition in ("iid", "noniid"), "data.partition must be iid or noniid"),
        (1 <= d.classes_per_client <= d.num_classes, "data.classes_per_client must lie in [1, num_classes]"),
        (cfg.bank.capacity >= 1 and cfg.bank.upload_size >= 1, "bank sizes must be positive"),
        (cfg.contrast.tau > 0, "contrast.tau must be > 0"),
        (cfg.neighbor.tau_nm > 0, "neighbor.tau_nm must be > 0"),
        (1 <= cfg.neighbor.num_neighbors <= cfg.neighbor.candidates,
         "neighbor.num_neighbors must lie in [1, neighbor.candidates]"),
        (cfg.neighbor.lam >= 0, "neighbor.lambda must be >= 0"),
        (cfg.privacy.k_mix >= 1, "privacy.k_mix must be >= 1"),
        (0.0 <= cfg.privacy.lambda_floor <= 1.0 / max(cfg.privacy.k_mix, 1),
         "privacy.lambda_floor must lie in [0, 1/k_mix]"),
        (cfg.privacy.sign_mask in ("per_coordinate", "off"), "privacy.sign_mask must be per_coordinate or off"),
        (cfg.probe.knn_k >= 1, "probe.knn_k must be >= 1"),
        (len(cfg.model.hidden) >= 0 and all(h >= 1 for h in cfg.model.hidden), "model.hidden widths must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def _coerce(raw: str, default: Any, where: str) -> Any:
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from exc


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    base = ExperimentConfig()
    section_names = {f.name for f in dataclasses.fields(base)}
    for sec, key in REQUIRED_KEYS:
        if not parser.has_option(sec, key):
            raise ConfigError(f"missing required key {sec}.{key}")
    updates: dict[str, dict[str, Any]] = {}
    for sec in parser.sections():
        if sec not in section_names:
            raise ConfigError(f"unknown section [{sec}]")
        defaults = dataclasses.asdict(getattr(base, sec))
        for key, raw in parser.items(sec):
            attr = _ALIASES.get((sec, key), key)
            if attr not in defaults:
                raise ConfigError(f"unknown key {sec}.{key}")
            updates.setdefault(sec, {})[attr] = _coerce(raw, defaults[attr], f"{sec}.{key}")
    return base.replace(**updates)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    inverse = {(sec, attr): key for (sec, key), attr in _ALIASES.items()}
    lines = []
    for sec, values in cfg.to_dict().items():
        lines.append(f"[{sec}]")
        for attr, val in values.items():
            key = inverse.get((sec, attr), attr)
            if isinstance(val, (tuple, list)):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = str(val).lower()
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)
