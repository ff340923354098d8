"""RunConfig: YAML document -> nested dataclasses, unknown keys rejected.

The config hash covers everything except ``paths`` and ``stage`` so that
one experiment's stats, caches and all of its stages share a hash, while a
changed schedule, loss weight or encoder produces a different one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional

import yaml

from .losses import LossWeights
from .networks import NetworkConfig

CACHE_ENV = "DEEPXLATE_CACHE"


class ConfigError(ValueError):
    pass


@dataclass
class EncoderCfg:
    profile: str = "vgg19"  # vgg19 | toy
    weights: Optional[str] = None
    channels: List[int] = field(default_factory=lambda: [8, 16, 32, 64, 64])
    input_side: int = 224
    embedding_dim: Optional[int] = None
    seed: int = 0


@dataclass
class DomainCfg:
    folder: Optional[str] = None
    coco_annotations: Optional[str] = None
    coco_images: Optional[str] = None
    category: Optional[str] = None
    min_area_fraction: Optional[float] = None


@dataclass
class ScheduleCfg:
    epochs: int = 400
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 10
    inverter_batch_size: int = 25
    critic_steps: int = 4


@dataclass
class LossCfg:
    lambda_gp: float = 10.0
    lambda_cyc: float = 100.0
    lambda_idty: float = 100.0
    inverter_l1: float = 100.0
    inverter_adv: float = 1.0


@dataclass
class NetworksCfg:
    gn_groups: int = 32
    controller_width: Optional[int] = None
    controller_hidden: int = 1000
    critic_max_width: int = 512
    disc_base_width: int = 64


@dataclass
class PathsCfg:
    work_dir: str = "runs/default"
    cache_dir: Optional[str] = None


@dataclass
class StageCfg:
    kind: Optional[str] = None  # deepest | conditional | inverter
    level: Optional[int] = None
    domain: Optional[str] = None


@dataclass
class RunConfig:
    name: str = "default"
    seed: int = 0
    encoder: EncoderCfg = field(default_factory=EncoderCfg)
    domains: Dict[str, DomainCfg] = field(default_factory=dict)
    levels: List[int] = field(default_factory=lambda: [5, 4, 3])
    augment_copies: int = 0
    schedule: ScheduleCfg = field(default_factory=ScheduleCfg)
    loss: LossCfg = field(default_factory=LossCfg)
    networks: NetworksCfg = field(default_factory=NetworksCfg)
    paths: PathsCfg = field(default_factory=PathsCfg)
    stage: StageCfg = field(default_factory=StageCfg)

    # --- derived --------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("paths")
        d.pop("stage")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss.lambda_gp, self.loss.lambda_cyc, self.loss.lambda_idty)

    @property
    def network_config(self) -> NetworkConfig:
        return NetworkConfig(**dataclasses.asdict(self.networks))

    def dir(self, kind: str) -> str:
        if kind == "cache":
            root = os.environ.get(CACHE_ENV) or self.paths.cache_dir
            if root:
                return root
        return os.path.join(self.paths.work_dir, kind)

    def validate(self) -> "RunConfig":
        if self.encoder.profile not in ("vgg19", "toy"):
            raise ConfigError(f"encoder.profile: unknown profile {self.encoder.profile!r}")
        if self.encoder.profile == "vgg19":
            if not self.encoder.weights:
                raise ConfigError("encoder.weights: required for the vgg19 profile")
            if self.encoder.input_side != 224:
                raise ConfigError("encoder.input_side: the vgg19 profile uses 224")
        if self.encoder.input_side % 16:
            raise ConfigError("encoder.input_side: must be divisible by 16")
        if len(self.encoder.channels) != 5:
            raise ConfigError("encoder.channels: need exactly 5 entries")
        if sorted(self.domains) != ["A", "B"]:
            raise ConfigError(f"domains: need exactly keys A and B, got {sorted(self.domains)}")
        for k, d in self.domains.items():
            if bool(d.folder) == bool(d.category):
                raise ConfigError(f"domains.{k}: give either folder or a COCO category")
            if d.category and not (d.coco_annotations and d.coco_images):
                raise ConfigError(f"domains.{k}: COCO domains need coco_annotations and coco_images")
        lv = list(self.levels)
        if not lv or lv != list(range(5, 5 - len(lv), -1)):
            raise ConfigError(f"levels: must be contiguous descending from 5, got {lv}")
        s = self.schedule
        for name in ("epochs", "batch_size", "inverter_batch_size", "critic_steps"):
            if getattr(s, name) < 1:
                raise ConfigError(f"schedule.{name}: must be >= 1")
        if s.lr <= 0:
            raise ConfigError("schedule.lr: must be positive")
        for f in fields(self.loss):
            if getattr(self.loss, f.name) < 0:
                raise ConfigError(f"loss.{f.name}: must be non-negative")
        if self.stage.kind not in (None, "deepest", "conditional", "inverter"):
            raise ConfigError(f"stage.kind: unknown stage {self.stage.kind!r}")
        return self


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key(s): {', '.join(where + u for u in unknown)}")
    kwargs = {}
    hints = {
        "encoder": EncoderCfg, "schedule": ScheduleCfg, "loss": LossCfg,
        "networks": NetworksCfg, "paths": PathsCfg, "stage": StageCfg,
    }
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if cls is RunConfig and key == "domains":
            if not isinstance(value, dict):
                raise ConfigError("domains: expected a mapping of domain id -> settings")
            kwargs[key] = {str(k): _build(DomainCfg, v, f"domains.{k}") for k, v in value.items()}
        elif cls is RunConfig and key in hints:
            kwargs[key] = _build(hints[key], value, sub)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def _coerce(value: str):
    return yaml.safe_load(value)


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``dotted.key=value`` (value parsed as YAML) to a raw config dict."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {p} is not a mapping")
    node[parts[-1]] = _coerce(value)


def load_config(path: Optional[str] = None, overrides: Optional[List[str]] = None) -> RunConfig:
    data: dict = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        base = os.path.dirname(os.path.abspath(path))
        data = _resolve_relative(data, base)
    for ov in overrides or []:
        apply_override(data, ov)
    return _build(RunConfig, data, "").validate()


def _resolve_relative(data: dict, base: str) -> dict:
    """Interpret relative paths in the file relative to the file's directory."""
    def fix(p):
        return p if p is None or os.path.isabs(p) else os.path.normpath(os.path.join(base, p))

    for d in (data.get("domains") or {}).values():
        if isinstance(d, dict):
            for k in ("folder", "coco_annotations", "coco_images"):
                if k in d:
                    d[k] = fix(d[k])
    enc = data.get("encoder") or {}
    if isinstance(enc, dict) and enc.get("weights"):
        enc["weights"] = fix(enc["weights"])
    paths = data.get("paths") or {}
    if isinstance(paths, dict):
        for k in ("work_dir", "cache_dir"):
            if paths.get(k):
                paths[k] = fix(paths[k])
    return data


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
