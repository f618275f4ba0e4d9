"""Run configuration: dataclasses, YAML loading, and dotted-path overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(Exception):
    """A configuration value violates the run contract."""


@dataclass
class TrainingSettings:
    input_size: tuple[int, int] = (64, 112)
    batch_size: int = 2
    delta: int = 5
    lr: float = 3e-4
    weight_decay: float = 1e-4
    epochs: int = 2
    iters_per_epoch: int = 8
    lambda1: float = 0.25
    lambda2: float = 0.25
    lambda3: float = 0.5
    ssl_mode: str = "end_to_end"
    branching: bool = True
    ns_blocks: int = 3
    seed: int = 0
    device: str = "cpu"
    out_dir: str = "runs/default"
    checkpoint_every: int = 1
    decoder_hidden: int = 32
    dump_attention: bool = False


@dataclass
class BackboneSettings:
    kind: str = "toy"
    reduced_channels: int = 32
    low_tap: int | None = None
    high_tap: int | None = None
    weights: str | None = None
    toy_widths: tuple[int, int, int, int] = (16, 32, 64, 128)


@dataclass
class AttentionSettings:
    groups: int = 4
    kernel_k: int = 3
    dilations_pair: tuple[int, ...] = (3, 4, 3, 4)
    dilations_refine: tuple[int, ...] = (1, 2, 1, 2)


@dataclass
class SslSettings:
    tau: float = 0.07
    momentum: float = 0.5
    cluster_k: int = 4
    negatives: int = 64
    dim: int = 128
    grid: int = 3
    patch_size: tuple[int, int] = (32, 32)
    pretrain_epochs: int = 1


@dataclass
class RunConfig:
    training: TrainingSettings = field(default_factory=TrainingSettings)
    backbone: BackboneSettings = field(default_factory=BackboneSettings)
    attention: AttentionSettings = field(default_factory=AttentionSettings)
    ssl: SslSettings = field(default_factory=SslSettings)

    def validate(self) -> None:
        t = self.training
        lam_sum = t.lambda1 + t.lambda2 + t.lambda3
        if abs(lam_sum - 1.0) > 1e-9:
            raise ConfigError(
                f"training.lambda1 + training.lambda2 + training.lambda3 must equal 1, "
                f"got {t.lambda1} + {t.lambda2} + {t.lambda3} = {lam_sum}")
        if min(t.lambda1, t.lambda2, t.lambda3) < 0:
            raise ConfigError("training.lambda1/2/3 must be nonnegative")
        if t.lr <= 0:
            raise ConfigError(f"training.lr must be > 0, got {t.lr}")
        if t.delta < 1:
            raise ConfigError(f"training.delta must be >= 1, got {t.delta}")
        if t.ssl_mode not in ("off", "external_pretrain", "end_to_end"):
            raise ConfigError(f"training.ssl_mode invalid: {t.ssl_mode!r}")
        if t.ns_blocks not in (2, 3, 4):
            raise ConfigError(f"training.ns_blocks must be 2, 3 or 4, got {t.ns_blocks}")
        c = self.backbone.reduced_channels
        if c % 2 or c % self.attention.groups:
            raise ConfigError(
                f"backbone.reduced_channels {c} must be divisible by 2 and by "
                f"attention.groups {self.attention.groups}")
        if len(self.attention.dilations_pair) != self.attention.groups \
                or len(self.attention.dilations_refine) != self.attention.groups:
            raise ConfigError("attention dilation lists must have one entry per group")
        if self.ssl.grid < 2:
            raise ConfigError(f"ssl.grid must be >= 2, got {self.ssl.grid}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "training": TrainingSettings,
    "backbone": BackboneSettings,
    "attention": AttentionSettings,
    "ssl": SslSettings,
}

_TUPLE_FIELDS = {
    ("training", "input_size"),
    ("backbone", "toy_widths"),
    ("attention", "dilations_pair"),
    ("attention", "dilations_refine"),
    ("ssl", "patch_size"),
}


def _coerce(section: str, key: str, value):
    if (section, key) in _TUPLE_FIELDS and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for section, payload in (data or {}).items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        target = getattr(cfg, section)
        valid = {f.name for f in dataclasses.fields(target)}
        for key, value in (payload or {}).items():
            if key not in valid:
                raise ConfigError(f"unknown config key {section}.{key}")
            setattr(target, key, _coerce(section, key, value))
    cfg.validate()
    return cfg


def load_config(path: Path | str) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides; values parse as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(f"override path {dotted!r} must be <section>.<key>")
        section, key = parts
        target = getattr(cfg, section)
        if key not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key {section}.{key}")
        setattr(target, key, _coerce(section, key, yaml.safe_load(raw)))
    cfg.validate()
    return cfg
