"""Experiment configuration: one JSON document, validated before any work.

Unknown keys are rejected at every level, and the error names the full key
path (for example ``train.lr_x``).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError, GfdannError
from .evaluation import VARIANTS
from .features import FeatureConfig
from .model import ArchConfig
from .synth import DomainShift, GeneratorConfig
from .training import TrainConfig

__all__ = ["SCHEMA_VERSION", "ExperimentConfig", "load_config", "parse_config"]

SCHEMA_VERSION = 1

# derived from the data and the feature grid, never set by hand
_ARCH_DERIVED = {"input_shape", "n_individuals_1", "n_individuals_2", "n_classes", "n_domains"}
_TRAIN_DERIVED = {"seed", "gfe_enabled", "dbda_enabled"}


def _build(cls, raw: Any, path: str, exclude=frozenset()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object, got {type(raw).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key '{path}.{key}'")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        value = raw[f.name]
        if f.name == "domain_shift" and cls is GeneratorConfig:
            value = _build(DomainShift, value, f"{path}.domain_shift")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except GfdannError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_path: Optional[str] = None
    generator: Optional[GeneratorConfig] = None
    features: FeatureConfig = field(default_factory=FeatureConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    domain_shift: Optional[DomainShift] = None
    variant: str = "gfdann"
    output_dir: str = "results"
    seed: int = 0
    seeds: int = 1
    jobs: int = 1
    projection_subject: Optional[int] = None

    @property
    def effective_shift(self) -> Optional[DomainShift]:
        """Shift for held-out subjects: explicit, else the generator's."""
        if self.domain_shift is not None:
            return self.domain_shift
        if self.generator is not None:
            return self.generator.domain_shift
        return None

    def to_dict(self) -> dict:
        arch = self.arch.to_dict()
        for k in _ARCH_DERIVED:
            arch.pop(k, None)
        train = self.train.to_dict()
        for k in _TRAIN_DERIVED:
            train.pop(k, None)
        features = dataclasses.asdict(self.features)
        features = {k: list(v) if isinstance(v, tuple) else v for k, v in features.items()}
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset_path": self.dataset_path,
            "generator": self.generator.to_dict() if self.generator is not None else None,
            "features": features,
            "arch": arch,
            "train": train,
            "domain_shift": dataclasses.asdict(self.domain_shift) if self.domain_shift is not None else None,
            "variant": self.variant,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "seeds": self.seeds,
            "jobs": self.jobs,
            "projection_subject": self.projection_subject,
        }


_TOP_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)} | {"schema_version"}


def parse_config(raw: Any) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key '{key}'")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    variant = raw.get("variant", "gfdann")
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {sorted(VARIANTS)}, got {variant!r}")
    for key in ("seed", "seeds", "jobs"):
        if key in raw and (not isinstance(raw[key], int) or isinstance(raw[key], bool)):
            raise ConfigError(f"{key} must be an integer")
    if raw.get("seeds", 1) < 1 or raw.get("jobs", 1) < 1:
        raise ConfigError("seeds and jobs must be >= 1")
    for key in ("dataset_path", "output_dir"):
        if raw.get(key) is not None and not isinstance(raw[key], str):
            raise ConfigError(f"{key} must be a string path")
    generator = raw.get("generator")
    shift = raw.get("domain_shift")
    return ExperimentConfig(
        dataset_path=raw.get("dataset_path"),
        generator=_build(GeneratorConfig, generator, "generator") if generator is not None else None,
        features=_build(FeatureConfig, raw.get("features"), "features"),
        arch=_build(ArchConfig, raw.get("arch"), "arch", _ARCH_DERIVED),
        train=_build(TrainConfig, raw.get("train"), "train", _TRAIN_DERIVED),
        domain_shift=_build(DomainShift, shift, "domain_shift") if shift is not None else None,
        variant=variant,
        output_dir=raw.get("output_dir", "results"),
        seed=raw.get("seed", 0),
        seeds=raw.get("seeds", 1),
        jobs=raw.get("jobs", 1),
        projection_subject=raw.get("projection_subject"),
    )


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(raw)
