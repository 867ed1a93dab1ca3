"""Run configuration: one YAML tree validated into the per-module configs.

Every hyperparameter defaults to the published protocol values, so an empty
section reproduces the reference setup. Unknown keys and type mismatches are
rejected up front with the offending field name.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .classic_augment import ClassicAugmentConfig, SpecAugmentConfig
from .evaluate import ALL_STRATEGIES, ClassifierConfig
from .features import MelConfig
from .gan import GanConfig
from .vocoder import GriffinLimConfig


class ConfigError(Exception):
    """Invalid run configuration; the message names the field."""


@dataclass
class RunConfig:
    data_root: str = "data"
    labels_file: str = "data/labels.csv"
    work_dir: str = "work"
    fold_seed: int = 0
    n_folds: int = 5
    seed: int = 0
    norm_scope: str = "train"  # "global" restores whole-dataset normalization
    strategies: list[str] = field(default_factory=lambda: ["none"])
    mel: MelConfig = field(default_factory=MelConfig)
    classic: ClassicAugmentConfig = field(default_factory=ClassicAugmentConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    fid_classifier: ClassifierConfig | None = None
    griffin_lim: GriffinLimConfig = field(default_factory=GriffinLimConfig)

    def __post_init__(self):
        if self.norm_scope not in ("train", "global"):
            raise ConfigError(f"norm_scope: must be 'train' or 'global', got {self.norm_scope!r}")
        bad = [s for s in self.strategies if s not in ALL_STRATEGIES]
        if bad:
            raise ConfigError(f"strategies: unknown {bad}; choose from {ALL_STRATEGIES}")
        if self.n_folds < 2:
            raise ConfigError("n_folds: must be >= 2")


_SECTION_TYPES = {
    "mel": MelConfig,
    "classic": ClassicAugmentConfig,
    "gan": GanConfig,
    "classifier": ClassifierConfig,
    "fid_classifier": ClassifierConfig,
    "griffin_lim": GriffinLimConfig,
}


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown field")
    kwargs = {}
    for name, value in data.items():
        if name == "specaug" and isinstance(value, dict):
            kwargs[name] = _build_dataclass(SpecAugmentConfig, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path: Path) -> RunConfig:
    """Parse and validate a YAML run configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config root: expected a mapping, got {type(raw).__name__}")
    kwargs = {}
    known = {f.name for f in fields(RunConfig)}
    for name, value in raw.items():
        if name not in known:
            raise ConfigError(f"{name}: unknown field")
        if name in _SECTION_TYPES:
            if value is None:
                value = {}
            cls = _SECTION_TYPES[name]
            if name == "gan" and isinstance(value, dict):
                value = {
                    k: tuple(v) if k in ("gen_channels", "critic_channels") and isinstance(v, list) else v
                    for k, v in value.items()
                }
            if name == "griffin_lim" and isinstance(value, dict) and "mel" in value:
                value = dict(value)
                value["mel"] = _build_dataclass(MelConfig, value["mel"], "griffin_lim.mel")
                mel_cfg = value.pop("mel")
                section = _build_dataclass(cls, value, name)
                kwargs[name] = dataclasses.replace(section, mel=mel_cfg)
                continue
            kwargs[name] = _build_dataclass(cls, value, name)
        else:
            kwargs[name] = value
    try:
        cfg = RunConfig(**kwargs)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(str(exc)) from exc
    if "griffin_lim" not in raw or (isinstance(raw.get("griffin_lim"), dict) and "mel" not in raw["griffin_lim"]):
        cfg.griffin_lim = dataclasses.replace(cfg.griffin_lim, mel=cfg.mel)
    return cfg


def config_hash(cfg: RunConfig) -> str:
    """Stable digest of the full configuration, for artifact provenance."""

    def encode(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: encode(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, (list, tuple)):
            return [encode(v) for v in obj]
        return obj

    blob = json.dumps(encode(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
