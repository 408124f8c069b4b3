"""Nested experiment configuration (YAML) with flag overrides.

Layout::

    seed: 0
    mode: cosmos            # cosmos | local_only | single_cluster
    data:
      kind: synthetic       # synthetic | csv
      num_classes: 6
      features: 16
      per_class: 250
      separation: 2.0
      path: null            # csv only
      header: false
    partition:
      num_clients: 12
      dirichlet_alpha: 5.0
      ...                   # any PartitionSpec field except seed
    protocol:
      num_rounds: 5
      ...                   # any ProtocolConfig field except seed/workers

A run manifest is also accepted: its ``config`` entry is read instead.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .data import Dataset, Partition, PartitionSpec, generate_synthetic, load_csv, partition
from .errors import ConfigError, CosmosError
from .protocol import ProtocolConfig

MODES = ("cosmos", "local_only", "single_cluster")
DATA_KINDS = ("synthetic", "csv")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"
    num_classes: int = 6
    features: int = 16
    per_class: int = 250
    separation: float = 2.0
    path: str | None = None
    header: bool = False


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 12
    dirichlet_alpha: float = 5.0
    num_groups: int = 3
    pool_fraction: float = 0.10
    public_fraction: float = 0.20
    test_fraction: float = 0.25


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    mode: str = "cosmos"
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    workers: int = 1

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        proto = out["protocol"]
        proto.pop("seed")
        proto.pop("workers")
        proto["client_models"] = list(proto["client_models"])
        return out

    def protocol_config(self) -> ProtocolConfig:
        return replace(self.protocol, seed=self.seed, workers=self.workers)

    def partition_spec(self) -> PartitionSpec:
        p = self.partition
        return PartitionSpec(
            num_clients=p.num_clients,
            dirichlet_alpha=p.dirichlet_alpha,
            num_groups=p.num_groups,
            pool_fraction=p.pool_fraction,
            public_fraction=p.public_fraction,
            test_fraction=p.test_fraction,
            seed=self.seed,
        )

    def load_dataset(self) -> Dataset:
        d = self.data
        if d.kind == "csv":
            return load_csv(d.path, d.num_classes, header=d.header)
        return generate_synthetic(d.num_classes, d.features, d.per_class, d.separation, self.seed)

    def build_partition(self) -> Partition:
        return partition(self.load_dataset(), self.partition_spec())

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.data.kind not in DATA_KINDS:
            raise ConfigError(f"data.kind must be one of {DATA_KINDS}, got {self.data.kind!r}")
        if self.data.kind == "csv" and not self.data.path:
            raise ConfigError("data.path is required for csv data")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.partition_spec().validate()
            self.protocol_config().validate()
        except CosmosError as exc:
            raise ConfigError(str(exc)) from exc


_SKIP = {"protocol": {"seed", "workers"}}
# fields whose default is None: their value type cannot be read off the default
_NULLABLE = {
    ("data", "path"): str,
    ("protocol", "b0"): float,
    ("protocol", "target_k"): int,
    ("protocol", "reg_radius"): float,
}


def _check(where: str, value: Any, kind: type):
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"{where} must be of type {kind.__name__}, got {value!r}")
    return float(value) if kind is float else value


def _coerce(section: str, name: str, value: Any, default: Any):
    where = f"{section}.{name}" if section else name
    kind = _NULLABLE.get((section, name))
    if kind is not None:
        return None if value is None else _check(where, value, kind)
    if value is None:
        raise ConfigError(f"{where} may not be null")
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{where} must be a list of strings")
        return tuple(value)
    return _check(where, value, type(default))


def _build(cls, section: str, raw: dict | None):
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    skip = _SKIP.get(section, set())
    known = {f.name for f in fields(cls)} - skip
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    defaults = cls()
    return cls(**{k: _coerce(section, k, v, getattr(defaults, k)) for k, v in raw.items()})


def from_dict(raw: dict | None) -> ExperimentConfig:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    if isinstance(raw.get("config"), dict):
        raw = raw["config"]
    top = {"seed", "mode", "data", "partition", "protocol", "workers"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = ExperimentConfig(
        seed=_coerce("", "seed", raw.get("seed", 0), 0),
        mode=_coerce("", "mode", raw.get("mode", "cosmos"), "cosmos"),
        data=_build(DataConfig, "data", raw.get("data")),
        partition=_build(PartitionConfig, "partition", raw.get("partition")),
        protocol=_build(ProtocolConfig, "protocol", raw.get("protocol")),
        workers=_coerce("", "workers", raw.get("workers", 1), 1),
    )
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read a YAML (or JSON) config or run manifest."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        # manifests are JSON; json keeps Infinity, which YAML would read as a string
        raw = json.loads(text) if text.lstrip().startswith("{") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return from_dict(raw)


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Apply flag-style overrides; ``None`` values are ignored."""
    ov = {k: v for k, v in overrides.items() if v is not None}
    proto = {}
    mapping = {"rounds": "num_rounds", "b0": "b0", "lam": "lam",
               "temperature": "temperature", "aggregation": "aggregation"}
    for key, target in mapping.items():
        if key in ov:
            proto[target] = ov.pop(key)
    if "b0" in proto:
        proto["b0"] = float(proto["b0"])
    if proto:
        cfg = replace(cfg, protocol=replace(cfg.protocol, **proto))
    if "clients" in ov:
        cfg = replace(cfg, partition=replace(cfg.partition, num_clients=ov.pop("clients")))
    if "seed" in ov:
        cfg = replace(cfg, seed=ov.pop("seed"))
    if "workers" in ov:
        cfg = replace(cfg, workers=ov.pop("workers"))
    if ov:
        raise ConfigError(f"unknown override(s): {', '.join(sorted(ov))}")
    cfg.validate()
    return cfg
