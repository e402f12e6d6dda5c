"""Experiment configuration: strict YAML schema with flag overrides."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .augment import AugPolicy
from .errors import ConfigError, FewMaxError
from .loss import TAU, NegativePolicy
from .nets import ArchConfig
from .train import METHODS, OptimConfig

OUTPUT_ROOT_ENV = "FEWMAX_OUTPUT_ROOT"


@dataclass
class DataConfig:
    source_manifest: Optional[str] = None
    target_manifest: Optional[str] = None
    # labeled target-domain sets used only by evaluation
    probe_train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    bank_manifest: Optional[str] = None
    class_ids: Optional[list] = None
    per_class: int = 10
    few_shot_seed: int = 0
    normalize: bool = False


@dataclass
class AugmentConfig:
    alpha: float = 1.0
    M: int = 4
    mri_mag_range: list = field(default_factory=lambda: [0.5, 1.5])
    complex_aug: bool = False


@dataclass
class OptimSection:
    lr: float = 0.125
    momentum: float = 0.9
    weight_decay: float = 0.9e-4
    batch_size: int = 64
    epochs: int = 100


@dataclass
class ModelConfig:
    in_channels: int = 3
    widths: list = field(default_factory=lambda: [16, 32, 64])
    head_hidden: int = 128
    dim: int = 128
    dtype: str = "float32"


@dataclass
class EvalConfig:
    energy: bool = False
    probe: bool = False
    retrieval: int = 0
    nrmse: bool = False
    landscape: int = 0
    gradnorm: bool = False
    probe_steps: int = 500
    nrmse_steps: int = 400
    retrieval_queries: int = 8


@dataclass
class ExperimentConfig:
    method: str = "few_max"
    seed: int = 0
    tau: float = TAU
    exclude_partner: bool = True
    anchor: Optional[str] = None
    output_dir: Optional[str] = None
    checkpoint_every: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optim: OptimSection = field(default_factory=OptimSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        try:
            self.aug_policy()
            self.optim_config()
            self.arch()
        except FewMaxError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def aug_policy(self) -> AugPolicy:
        a = self.augment
        return AugPolicy(
            alpha=a.alpha, M=a.M, mri_mag_range=tuple(a.mri_mag_range), seed=self.seed, complex_aug=a.complex_aug
        )

    def optim_config(self) -> OptimConfig:
        return OptimConfig(**dataclasses.asdict(self.optim), seed=self.seed)

    def arch(self) -> ArchConfig:
        return ArchConfig(**dataclasses.asdict(self.model))

    def negatives(self) -> NegativePolicy:
        return NegativePolicy(exclude_partner=self.exclude_partner)

    def run_dir(self, default_name) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name

    def to_dict(self):
        return dataclasses.asdict(self)


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in values.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{where}.{key}" if where else key)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(values) -> ExperimentConfig:
    return _build(ExperimentConfig, values or {}, "").validate()


def _coerce(text):
    return yaml.safe_load(text)


def apply_overrides(values, overrides):
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars."""
    values = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = values
        for p in parts[:-1]:
            node[p] = dict(node.get(p) or {})
            node = node[p]
        node[parts[-1]] = _coerce(raw)
    return values


PATH_KEYS = ("anchor", "output_dir")
DATA_PATH_KEYS = ("source_manifest", "target_manifest", "probe_train_manifest", "test_manifest", "bank_manifest")


def _resolve_paths(values, base: Path):
    """Make file paths in a config file relative to the file itself."""

    def fix(node, key):
        v = node.get(key)
        if isinstance(v, str) and v and not Path(v).is_absolute():
            node[key] = str((base / v).resolve())

    values = dict(values)
    for key in PATH_KEYS:
        fix(values, key)
    if isinstance(values.get("data"), dict):
        values["data"] = dict(values["data"])
        for key in DATA_PATH_KEYS:
            fix(values["data"], key)
    return values


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Load a YAML config and apply ``key=value`` overrides.

    Relative paths inside the file resolve against the file's directory;
    paths given as overrides resolve against the working directory.
    """
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            values = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        values = _resolve_paths(values, path.parent)
    return from_dict(apply_overrides(values, overrides))


def write_snapshot(config: ExperimentConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.yaml"
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    return path
