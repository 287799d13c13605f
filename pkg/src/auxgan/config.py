"""Run configuration: one YAML/JSON document, unknown keys rejected.

Example::

    schema_version: 1
    data: {path: data/}
    train:
      model: pixmc
      epochs: 10
      objective: {lambda_l1: 50, terms: [GAN, L1]}
    eval: {kid_block_size: 50}
    out: runs/pixmc
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .datapipe import AugmentConfig
from .errors import InvalidConfigError
from .metrics import EmbeddingSpec, EvalConfig
from .nets import GeneratorSpec
from .objectives import LRSchedule, ObjectiveConfig
from .trainer import TrainConfig, config_hash

SCHEMA_VERSION = 1
OUT_ENV = "AUXGAN_OUT"

# nested dataclass fields, by owner
_NESTED = {
    TrainConfig: {
        "objective": ObjectiveConfig,
        "schedule": LRSchedule,
        "generator": GeneratorSpec,
        "augment": AugmentConfig,
    },
    EvalConfig: {"extractor": EmbeddingSpec},
}


@dataclass
class DataConfig:
    path: Optional[str] = None
    n_paired: int = 32
    n_ct: int = 128
    resolution: int = 128
    seed: int = 1
    eval_fraction: float = 0.2


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: Optional[str] = None
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "data": dataclasses.asdict(self.data),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
            "out": self.out,
        }

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return config_hash(d)

    def out_dir(self, fallback="runs") -> Path:
        return Path(self.out or os.environ.get(OUT_ENV) or fallback)


def _build(cls, raw, where):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise InvalidConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise InvalidConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    nested = _NESTED.get(cls, {})
    for k, v in raw.items():
        if k in nested and v is not None:
            v = _build(nested[k], v, f"{where}.{k}")
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise InvalidConfigError(f"{where}: {err}") from None


def set_dotted(d: dict, key: str, value):
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise InvalidConfigError(f"cannot set {key}: {p} is not a mapping")
    cur[parts[-1]] = value


def parse_config(raw: dict) -> RunConfig:
    raw = dict(raw or {})
    version = raw.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise InvalidConfigError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")
    unknown = sorted(set(raw) - {"data", "train", "eval", "out"})
    if unknown:
        raise InvalidConfigError(f"unknown top-level keys {unknown}")
    return RunConfig(
        data=_build(DataConfig, raw.get("data"), "data"),
        train=_build(TrainConfig, raw.get("train"), "train"),
        eval=_build(EvalConfig, raw.get("eval"), "eval"),
        out=raw.get("out"),
    )


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Read ``path`` (YAML or JSON) and apply dotted-key ``overrides``."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            raise InvalidConfigError(f"{path}: {err}") from None
        if not isinstance(raw, dict):
            raise InvalidConfigError(f"{path}: top level must be a mapping")
    for k, v in (overrides or {}).items():
        if v is not None:
            set_dotted(raw, k, v)
    return parse_config(raw)


def dump_config(cfg: RunConfig, path):
    d = cfg.to_dict()
    d["config_hash"] = cfg.config_hash()
    Path(path).write_text(json.dumps(d, sort_keys=True, indent=2) + "\n")
