"""Run configuration: defaults, YAML file loading, flag overrides, digests.

Every field has a recorded default. The resolved merge (file over defaults,
flags over file) is persisted verbatim into run outputs, and its digest is
embedded in checkpoints and reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class UserError(RuntimeError):
    """Anticipated user mistake (bad input, bad config); maps to exit status 1."""


class ConfigError(UserError):
    pass


@dataclass
class ScheduleConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class CodecConfig:
    kind: str = "toy_autoencoder"
    downsample_factor: int = 8
    latent_channels: int = 4
    base_channels: int = 32
    pretrain_steps: int = 300
    pretrain_lr: float = 2e-3


@dataclass
class DenoiserConfig:
    base_channels: int = 64
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2, 4])
    attention_levels: list[int] = field(default_factory=lambda: [1, 2])
    embed_dim: int = 128
    num_heads: int = 4


@dataclass
class ConditioningConfig:
    concept_variant: str = "global_cls"
    concept_queries: int = 8
    control_enabled: bool = True
    concept_dropout: float = 0.0
    backbone_feature_dim: int = 64


@dataclass
class LossConfig:
    lambda_diff: float = 1.0
    lambda_perc: float = 0.2


@dataclass
class AugmentConfig:
    p: float = 0.5
    q: float = 0.5
    frontal_zoom_max: float = 1.15
    frontal_shift_max: float = 0.05
    frontal_rotation_max_deg: float = 5.0
    ego_rotation_max_deg: float = 10.0


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    learning_rate: float = 2e-4
    seed: int = 0
    checkpoint_every: int = 100
    log_every: int = 10


@dataclass
class SampleConfig:
    steps: int = 50
    eta: float = 0.0
    clamp_latents: bool = True
    guidance_scale: float = 1.0


@dataclass
class EvalConfig:
    hip_fraction: float = 0.5
    psnr_cap: float = 99.0
    sample_steps: int = 50
    seed: int = 0
    max_samples: int | None = None


@dataclass
class DataConfig:
    image_size: int = 64
    window: float = 5.0
    per_frontal: int = 10
    max_ego_per_frontal: int = 12
    val_fraction: float = 0.2
    manifest: str = ""


@dataclass
class PathsConfig:
    output_root: str = "runs"


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def default_config() -> RunConfig:
    return RunConfig()


def _apply_section(obj, section: str, values: dict, unknown: list[str]) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in names:
            unknown.append(f"{section}.{key}")
            continue
        setattr(obj, key, value)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, overlaid with the YAML file (if given), overlaid with overrides.

    Overrides use ``section.key=value`` with YAML-parsed values. Unknown keys
    are rejected, listed all at once.
    """
    cfg = default_config()
    unknown: list[str] = []
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}

    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        for section, values in raw.items():
            if section not in sections:
                unknown.append(str(section))
                continue
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be a mapping")
            _apply_section(sections[section], section, values, unknown)

    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, _, raw_value = item.partition("=")
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} must look like section.key")
        section, _, key = dotted.partition(".")
        if section not in sections:
            unknown.append(dotted)
            continue
        _apply_section(sections[section], section, {key: yaml.safe_load(raw_value)}, unknown)

    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    return cfg


def config_from_dict(data: dict) -> RunConfig:
    """Rebuild a RunConfig from its resolved dict form (e.g., out of a checkpoint)."""
    cfg = default_config()
    unknown: list[str] = []
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for section, values in data.items():
        if section not in sections:
            unknown.append(str(section))
            continue
        _apply_section(sections[section], section, dict(values), unknown)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    return cfg


def resolved_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_digest(cfg: RunConfig) -> str:
    canonical = json.dumps(resolved_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def save_resolved(cfg: RunConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(resolved_dict(cfg), sort_keys=True))
