"""Experiment configuration: nested dataclasses, validation and fingerprints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

MISSING_POLICIES = ("drop", "forward-fill")
DB_STRATEGIES = ("full_train", "category_balanced")
MECHANISMS = ("none", "random", "dtw", "pearson", "encoder")
ENCODER_ARCHS = ("tcn", "dlinear", "informer", "timesnet")
SCHEDULES = ("linear", "quadratic")
TARGETS = ("x0", "epsilon")
WEIGHTINGS = ("uniform", "gamma")
RMA_POSITIONS = ("front", "middle", "back")
FUSIONS = ("none", "linear", "cross_attention", "rma")
SIDE_FUSIONS = ("gate", "add")


@dataclass
class DatasetConfig:
    path: str | None = None
    l: int = 168
    h: int = 96
    stride: int = 1
    eval_stride: int | None = None  # None -> h
    target_features: list[int] | None = None  # None -> all features
    missing_policy: str = "forward-fill"
    split_seed: int = 0
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    timestamp_column: str | None = "auto"
    series_column: str | None = None
    label_column: str | None = None
    # used when path is None: generated imbalanced synthetic data
    synth_series: int = 40
    synth_length: int = 120
    synth_rare_fraction: float = 0.1
    synth_seed: int = 0


@dataclass
class EncoderConfig:
    architecture: str = "tcn"
    embedding_dim: int = 64
    hidden: int = 32
    levels: int = 3
    kernel_size: int = 3
    mask_ratio: float = 0.25
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64


@dataclass
class DatabaseConfig:
    mechanism: str = "encoder"
    strategy: str = "full_train"
    n_db: int = 256
    k: int = 3


@dataclass
class DiffusionConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.5
    schedule: str = "quadratic"
    target: str = "x0"
    weighting: str = "uniform"


@dataclass
class NetworkConfig:
    channels: int = 128
    num_blocks: int = 4
    heads: int = 8
    ff_dim: int = 64
    rma_position: str = "front"
    fusion: str = "rma"
    side_fusion: str = "gate"
    step_embed_dim: int = 128
    time_embed_dim: int = 128
    feature_embed_dim: int = 16


@dataclass
class TrainingConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.95, 0.999)
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    max_steps: int | None = None


@dataclass
class EvalConfig:
    num_samples: int = 50
    point: str = "median"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    suites: list[str] = field(default_factory=list)
    mse_compat: bool = False


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    database: DatabaseConfig = field(default_factory=DatabaseConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def fingerprint(self, *sections: str) -> str:
        """sha256 over the canonical JSON of the given sections (all when empty)."""
        d = self.to_dict()
        if sections:
            d = {s: d[s] for s in sections}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **overrides: Any) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. replace(**{"database.k": 0})."""
        d = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(d, key, value)
        return ExperimentConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = dict(d or {})
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, f in sections.items():
            if name == "seed":
                kwargs["seed"] = int(d.get("seed", 0))
                continue
            sub_cls = f.default_factory  # type: ignore[misc]
            kwargs[name] = _build_section(sub_cls, d.get(name) or {}, name)
        cfg = cls(**kwargs)
        validate(cfg)
        return cfg


def _build_section(sub_cls, values: dict, name: str):
    known = {f.name: f for f in dataclasses.fields(sub_cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    out = {}
    for key, value in values.items():
        if key in ("split_ratios", "betas") and value is not None:
            value = tuple(float(v) for v in value)
        out[key] = value
    try:
        return sub_cls(**out)
    except TypeError as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: ExperimentConfig) -> None:
    ds = cfg.dataset
    _check(ds.l > 0 and ds.h > 0, "dataset.l and dataset.h must be positive")
    _check(ds.stride >= 1, "dataset.stride must be >= 1")
    _check(ds.eval_stride is None or ds.eval_stride >= 1, "dataset.eval_stride must be >= 1")
    _check(ds.missing_policy in MISSING_POLICIES, f"dataset.missing_policy must be one of {MISSING_POLICIES}")
    _check(len(ds.split_ratios) == 3 and abs(sum(ds.split_ratios) - 1.0) < 1e-9
           and min(ds.split_ratios) >= 0, "dataset.split_ratios must be 3 nonnegative values summing to 1")
    enc = cfg.encoder
    _check(enc.architecture in ENCODER_ARCHS, f"encoder.architecture must be one of {ENCODER_ARCHS}")
    _check(enc.embedding_dim > 0 and enc.hidden > 0 and enc.levels > 0, "encoder sizes must be positive")
    _check(0.0 < enc.mask_ratio < 1.0, "encoder.mask_ratio must be in (0, 1)")
    _check(enc.epochs >= 0 and enc.batch_size > 0 and enc.lr > 0, "invalid encoder training settings")
    db = cfg.database
    _check(db.mechanism in MECHANISMS, f"database.mechanism must be one of {MECHANISMS}")
    _check(db.strategy in DB_STRATEGIES, f"database.strategy must be one of {DB_STRATEGIES}")
    _check(db.n_db > 0, "database.n_db must be positive")
    _check(db.k >= 0, "database.k must be >= 0")
    df = cfg.diffusion
    _check(df.T >= 1, "diffusion.T must be >= 1")
    _check(0 < df.beta_start <= df.beta_end < 1, "need 0 < beta_start <= beta_end < 1")
    _check(df.schedule in SCHEDULES, f"diffusion.schedule must be one of {SCHEDULES}")
    _check(df.target in TARGETS, f"diffusion.target must be one of {TARGETS}")
    _check(df.weighting in WEIGHTINGS, f"diffusion.weighting must be one of {WEIGHTINGS}")
    net = cfg.network
    _check(net.channels > 0 and net.num_blocks > 0 and net.heads > 0, "network sizes must be positive")
    _check(net.channels % net.heads == 0, "network.channels must be divisible by network.heads")
    _check(net.rma_position in RMA_POSITIONS, f"network.rma_position must be one of {RMA_POSITIONS}")
    _check(net.fusion in FUSIONS, f"network.fusion must be one of {FUSIONS}")
    _check(net.side_fusion in SIDE_FUSIONS, f"network.side_fusion must be one of {SIDE_FUSIONS}")
    _check(net.time_embed_dim % 2 == 0 and net.step_embed_dim % 2 == 0, "embedding dims must be even")
    tr = cfg.training
    _check(tr.lr > 0 and tr.batch_size > 0 and tr.max_epochs >= 1 and tr.patience >= 1,
           "invalid training settings")
    _check(tr.max_steps is None or tr.max_steps >= 1, "training.max_steps must be >= 1")
    ev = cfg.eval
    _check(ev.num_samples >= 1, "eval.num_samples must be >= 1")
    _check(ev.point in ("median", "mean"), "eval.point must be 'median' or 'mean'")


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a YAML/JSON config and apply ``key.sub=value`` overrides."""
    d: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            d = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{p} must contain a mapping")
    cfg = ExperimentConfig.from_dict(d)
    if overrides:
        parsed = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, raw = item.split("=", 1)
            parsed[key.strip()] = yaml.safe_load(raw)
        cfg = cfg.replace(**parsed)
    return cfg
