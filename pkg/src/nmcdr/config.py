"""Experiment configuration: TOML sections mapped onto dataclasses.

Unknown sections or keys are errors.  ``--set section.key=value`` overrides
parse ``value`` as a TOML literal (bare words fall back to strings).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import types
import typing
from dataclasses import asdict, dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .model import AblationFlags, ModelConfig
from .synth import SyntheticSpec
from .training import LossWeights, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    z_path: str = ""
    zbar_path: str = ""
    format: str = "tsv-ratings"
    min_interactions: int = 5
    split_min_interactions: int = 3
    k_u: float = 1.0
    d_s: float = 1.0
    validation: bool = False
    prepared: str = ""

    def __post_init__(self):
        from .data import FORMATS
        if self.format not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}")
        if not 0.0 <= self.k_u <= 1.0:
            raise ValueError("k_u must lie in [0, 1]")
        if not 0.0 < self.d_s <= 1.0:
            raise ValueError("d_s must lie in (0, 1]")
        if self.min_interactions < 1 or self.split_min_interactions < 1:
            raise ValueError("interaction minimums must be >= 1")


@dataclass
class StabilityConfig:
    configurations: int = 1
    trials: int = 1000
    n_nodes: int = 10
    in_dim: int = 8
    hidden: int = 8
    out_dim: int = 2
    edge_prob: float = 0.3
    weight_scale: float = 1.0
    perturbation: float = 1e-2
    c_sf: float = 1.0
    c_sp: float = 1.0
    checkpoint: str = ""

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError("n_nodes must be >= 2")
        if self.trials < 1 or self.configurations < 1:
            raise ValueError("trials and configurations must be >= 1")


@dataclass
class SweepConfig:
    parameter: str = "data.k_u"
    values: list = field(default_factory=lambda: [0.1, 0.5, 0.9])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    variants: list = field(default_factory=lambda: ["full"])


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    flags: AblationFlags = field(default_factory=AblationFlags)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Hash of everything except the output location."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]


SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name not in ("seed", "out")}


def _types(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def _coerce(value, tp, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if origin in (tuple, list) or tp in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return type(value)(value) if origin is None else (tuple(value) if origin is tuple else list(value))
    return value


def _build(cls, table: dict, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"{where}: expected a table")
    hints = _types(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}") for k, v in table.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    top = {}
    sections = {}
    for k, v in raw.items():
        if k in SECTIONS:
            sections[k] = _build(SECTIONS[k].default_factory, v, k)
        elif k in ("seed", "out"):
            top[k] = _coerce(v, int if k == "seed" else str, k)
        else:
            raise ConfigError(f"unknown top-level key {k!r}; allowed: seed, out, {sorted(SECTIONS)}")
    return ExperimentConfig(**top, **sections)


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, value = text.split("=", 1)
    path = key.strip().split(".")
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return path, parsed


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = json.loads(json.dumps(raw))
    for text in overrides:
        path, value = parse_override(text)
        node = raw
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {p} is not a section")
        node[path[-1]] = value
    return raw


def load(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path:
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
    return from_dict(apply_overrides(raw, overrides or []))


def with_override(cfg: ExperimentConfig, dotted: str, value) -> ExperimentConfig:
    raw = apply_overrides(cfg.to_dict(), [])
    node = raw
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown parameter {dotted!r}")
    node[parts[-1]] = value
    return from_dict(raw)


def _schema_for(tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        return {"type": "string"}
    if origin in (tuple, list) or tp in (list, tuple):
        return {"type": "array"}
    if args and type(None) in args:
        inner = [a for a in args if a is not type(None)][0]
        return {"anyOf": [_schema_for(inner), {"type": "null"}]}
    return {}


def json_schema() -> dict:
    """JSON-schema equivalent of the TOML layout (strict: no extra keys)."""
    props = {"seed": {"type": "integer"}, "out": {"type": "string"}}
    for name, f in SECTIONS.items():
        cls = f.default_factory
        hints = _types(cls)
        props[name] = {
            "type": "object",
            "additionalProperties": False,
            "properties": {g.name: _schema_for(hints[g.name]) for g in dataclasses.fields(cls) if g.init},
        }
    return {"$schema": "https://json-schema.org/draft/2020-12/schema", "title": "nmcdr experiment",
            "type": "object", "additionalProperties": False, "properties": props}
