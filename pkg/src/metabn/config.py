"""Run configuration: a JSON (or YAML) document mapped onto typed sections."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DomainSpec
from .errors import ConfigError
from .evaluation import Arm
from .layers import ArchConfig
from .ssl import SSLTaskConfig
from .training import JointConfig, MetaConfig


@dataclass
class DataConfig:
    spec: DomainSpec = field(default_factory=DomainSpec)
    num_sources: int = 8
    num_targets: int = 4


@dataclass
class ModelConfig:
    widths: tuple = (16, 32, 64)
    ssl_hidden: int = 64
    retention: float = 0.9
    eps: float = 1e-5


@dataclass
class EvalConfig:
    support_size: int = 12
    refine_lr: float | None = None  # None: use the outer learning rate delta
    refine_steps: int = 1
    refine_batch: int = 32
    hist_bins: int = 30


@dataclass
class AblationConfig:
    preset: str = "table3"
    arms: list | None = None


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ssl: SSLTaskConfig = field(default_factory=SSLTaskConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    meta_epochs: int = 10
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs/default"

    def arch(self) -> ArchConfig:
        s = self.data.spec
        return ArchConfig(
            kind="mlp" if s.kind == "blobs" else "conv",
            in_channels=s.channels,
            image_size=s.image_size,
            input_dim=2,
            widths=tuple(self.model.widths),
            num_classes=s.num_classes,
            ssl_kind=self.ssl.kind,
            ssl_hidden=self.model.ssl_hidden,
            projection_dim=self.ssl.projection_dim,
            predictor_hidden=self.ssl.predictor_hidden,
            retention=self.model.retention,
            eps=self.model.eps,
        )

    @property
    def refine_lr(self) -> float:
        return self.meta.delta if self.eval.refine_lr is None else self.eval.refine_lr

    def arms(self) -> list[Arm]:
        from .evaluation import PRESETS

        if self.ablation.arms:
            return [Arm(**a) if isinstance(a, dict) else a for a in self.ablation.arms]
        if self.ablation.preset not in PRESETS:
            raise ConfigError(f"ablation.preset: unknown preset {self.ablation.preset!r}")
        return [Arm(**vars(a)) for a in PRESETS[self.ablation.preset]]


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{where}.{key}: unknown key")
        sub = _SECTIONS.get((cls, key))
        kwargs[key] = _build(sub, value, f"{where}.{key}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "ssl"): SSLTaskConfig,
    (RunConfig, "joint"): JointConfig,
    (RunConfig, "meta"): MetaConfig,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "ablation"): AblationConfig,
    (DataConfig, "spec"): DomainSpec,
}


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "config")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    d = cfg.data
    if d.num_sources < 2:
        raise ConfigError(f"data.num_sources: need at least 2 source domains, got {d.num_sources}")
    if d.num_targets < 1:
        raise ConfigError(f"data.num_targets: need at least 1 target domain, got {d.num_targets}")
    try:
        d.spec.validate()
    except ValueError as exc:
        raise ConfigError(f"data.spec.{exc}") from exc
    if cfg.meta_epochs < 0 or cfg.joint.epochs < 0:
        raise ConfigError("epochs must be non-negative")
    if not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("seeds: need a non-empty list of integers")
    if cfg.eval.support_size < 1:
        raise ConfigError("eval.support_size: must be >= 1")
    try:
        cfg.arms()
    except TypeError as exc:
        raise ConfigError(f"ablation.arms: {exc}") from exc


def to_dict(cfg: RunConfig) -> dict:
    def convert(v):
        if isinstance(v, tuple):
            return [convert(x) for x in v]
        if isinstance(v, list):
            return [convert(x) for x in v]
        if isinstance(v, dict):
            return {k: convert(x) for k, x in v.items()}
        return v

    return convert(dataclasses.asdict(cfg))


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
