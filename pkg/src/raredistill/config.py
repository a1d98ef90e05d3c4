"""Run configuration: profile defaults, config-file loading, overrides.

Precedence is CLI flags > config file values > profile defaults. Unknown
keys are rejected rather than ignored, and the fully resolved config is
serialized into every run directory for provenance.
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import AugmentConfig
from .distill import DistillConfig
from .encoder import EncoderConfig
from .pretrain import PretrainConfig

PROFILES = ("desk", "paper")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    n_classes: int = 7
    per_class: int = 40
    image_size: int = 32
    separability: float = 1.0
    n_rare: int = 3
    layout: str = "folder_per_class"


@dataclass(frozen=True)
class EvalSection:
    n_way: int = 3
    k_shot: int = 5
    n_tasks: int = 3
    task_seed_base: int = 0
    baseline_c: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    output_dir: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one run seed into the training sections."""
        return dataclasses.replace(
            self,
            seed=seed,
            pretrain=dataclasses.replace(self.pretrain, seed=seed),
            distill=dataclasses.replace(self.distill, seed=seed),
        )


def desk_profile() -> RunConfig:
    """Small synthetic-data profile: runs end to end on one CPU in minutes.

    Uses the gentle augmentation strengths and a short (64-entry) key queue;
    at 32px with a few hundred images, the full-strength settings leave the
    contrastive task unlearnable (the loss never improves).
    """
    return RunConfig(profile="desk", augment=AugmentConfig.gentle(32))


def paper_profile() -> RunConfig:
    """Published hyperparameters: 224px inputs, 200 epochs, queue of 1280."""
    return RunConfig(
        profile="paper",
        data=DataSection(image_size=224),
        encoder=EncoderConfig(backbone="resnet12_like", input_size=224, embed_dim=128, width=16),
        augment=AugmentConfig(output_size=224),
        pretrain=PretrainConfig(
            epochs=200,
            batch_size=16,
            lr=0.03,
            lr_decay_points=(0.6, 0.8),  # epochs 120 and 160 of 200
            lr_decay_factor=0.1,
            sgd_momentum=0.9,
            weight_decay=1e-4,
            temperature=0.07,
            queue_size=1280,
            encoder_momentum=0.999,
        ),
        distill=DistillConfig(
            epochs=200,
            batch_size=16,
            lr=0.03,
            temperature=0.07,
            queue_size=1280,
            encoder_momentum=0.999,
        ),
    )


def profile_config(name: str) -> RunConfig:
    if name == "desk":
        return desk_profile()
    if name == "paper":
        return paper_profile()
    raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")


_SECTION_TYPES = {
    "data": DataSection,
    "encoder": EncoderConfig,
    "augment": AugmentConfig,
    "pretrain": PretrainConfig,
    "distill": DistillConfig,
    "eval": EvalSection,
}
_TOP_LEVEL_SCALARS = ("profile", "seed", "output_dir")


def _coerce(value, f: dataclasses.Field):
    # YAML gives lists where the dataclasses want tuples
    if isinstance(value, list):
        return tuple(value)
    return value


def _build_section(cls, values: dict, current):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in section {cls.__name__}: {sorted(unknown)}")
    merged = {f.name: getattr(current, f.name) for f in fields(cls)}
    for key, value in values.items():
        merged[key] = _coerce(value, known[key])
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in section {cls.__name__}: {exc}") from exc


def apply_mapping(config: RunConfig, mapping: dict) -> RunConfig:
    """Overlay a nested {section: {key: value}} mapping onto a RunConfig."""
    if not isinstance(mapping, dict):
        raise ConfigError("config document must be a mapping")
    unknown = set(mapping) - set(_SECTION_TYPES) - set(_TOP_LEVEL_SCALARS)
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    updates: dict = {}
    for key in _TOP_LEVEL_SCALARS:
        if key in mapping:
            updates[key] = mapping[key]
    for section, cls in _SECTION_TYPES.items():
        if section in mapping:
            values = mapping[section]
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            updates[section] = _build_section(cls, values, getattr(config, section))
    return dataclasses.replace(config, **updates)


def load_config(
    path: str | Path | None = None,
    profile: str | None = None,
    overrides: dict | None = None,
) -> RunConfig:
    """Resolve profile defaults, then the config file, then explicit overrides."""
    mapping: dict = {}
    if path is not None:
        with open(path) as fh:
            mapping = yaml.safe_load(fh) or {}
        if not isinstance(mapping, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
    name = profile or mapping.get("profile", "desk")
    config = profile_config(name)
    config = apply_mapping(config, mapping)
    if profile is not None:
        config = dataclasses.replace(config, profile=profile)
    if overrides:
        config = apply_mapping(config, overrides)
    return config


def save_resolved(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)
    return path
