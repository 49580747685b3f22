"""Run configuration and its TOML/JSON loader.

Top-level keys mirror ``RunConfig``; nested tables ``[model]``, ``[optimizer]``,
``[toy]``, ``[images]``, ``[eval]``, ``[loss]``, ``[loss.noise]``, ``[loss.policy]``
and ``[theory]`` mirror the dataclasses of the same name. Unknown keys are errors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

import tomli

from .data import SyntheticImageSpec, ToyDatasetSpec
from .errors import ConfigError
from .objectives import LossConfig
from .robust import KINDS

DATASETS = ("toy", "images", "cifar")
# stability weight and jitter used on the 2-D task, where there are no image augmentations
TOY_GAMMA = 4.0
TOY_JITTER = 0.3


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple = (32,)
    activation: str = "relu"
    mixable: tuple = (0, 1)


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 0.1


@dataclass(frozen=True)
class EvalSpec:
    kinds: tuple = KINDS
    severities: tuple = (1, 2, 3, 4, 5)
    n_sequences: int = 8
    n_frames: int = 31
    n_bins: int = 15


@dataclass(frozen=True)
class TheorySpec:
    n_points: int = 32
    eps_grid: tuple = (0.1, 0.05, 0.025, 0.0125)
    n_mc: int = 200_000
    sigma: float = 0.4
    weight_scale: float = 1.5
    aug_scale: float = 0.3
    lemma1_instances: int = 20
    lemma1_n_mc: int = 100_000
    thm3_trials: int = 100
    thm3_eps: tuple = (0.05, 0.1)
    thm3_gammas: tuple = (0.0, 1.0)
    thm3_n_mc: int = 200_000


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "toy"
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    epochs: int = 100
    batch_size: int = 50
    seeds: tuple = (0, 1, 2, 3, 4)
    toy: ToyDatasetSpec = field(default_factory=ToyDatasetSpec)
    images: SyntheticImageSpec = field(default_factory=SyntheticImageSpec)
    cifar_path: Optional[str] = None
    cifar_limit: int = 1000
    test_fraction: float = 0.5
    aug_bank: int = 8
    eval: EvalSpec = field(default_factory=EvalSpec)
    theory: TheorySpec = field(default_factory=TheorySpec)

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.dataset == "cifar" and not self.cifar_path:
            raise ConfigError("dataset 'cifar' needs cifar_path")
        bad = set(self.model.mixable) - set(range(len(self.model.hidden) + 1))
        if bad:
            raise ConfigError(f"mixable layers {sorted(bad)} do not exist")

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def with_toggles(self, augment: bool, feature_mix: bool, noise: bool, jsd: bool) -> "RunConfig":
        return replace(self, loss=self.loss.with_(use_augment=augment, use_feature_mix=feature_mix,
                                                   use_noise=noise, use_jsd=jsd))


def dataset_defaults(dataset: str) -> RunConfig:
    """Defaults per dataset: the toy protocol, or the desk-scale image protocol."""
    if dataset == "toy":
        return RunConfig(loss=LossConfig(gamma=TOY_GAMMA, vector_jitter=TOY_JITTER))
    return RunConfig(dataset=dataset, model=ModelSpec(hidden=(128,), activation="relu", mixable=(0, 1)),
                     optimizer=OptimizerSpec("sgd", 0.01), epochs=30, batch_size=64,
                     loss=LossConfig(image_shape=(32, 32, 3)), cifar_path=None)


def _coerce(value, default):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(_coerce(v, default[0]) if default else v for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _overlay(obj, table: dict, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in fields(obj)}
    changes = {}
    for key, value in table.items():
        if key not in names:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{key}")
        current = getattr(obj, key)
        if is_dataclass(current):
            changes[key] = _overlay(current, value, f"{where}.{key}" if where else key)
        elif key == "image_shape":
            changes[key] = None if value is None else tuple(value)
        else:
            changes[key] = _coerce(value, current)
    try:
        return replace(obj, **changes)
    except TypeError as exc:
        raise ConfigError(f"bad value in [{where or 'top'}]: {exc}") from exc


def from_dict(table: dict) -> RunConfig:
    name = table.get("dataset", "toy")
    # cifar shares the image defaults; its path arrives with the overlay
    base = dataset_defaults("images" if name == "cifar" else name)
    return _overlay(base, table, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix == ".json":
            table = json.loads(text)
        else:
            table = tomli.loads(text)
    except (json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(table)


def to_dict(cfg) -> dict:
    """Plain nested dict (tuples become lists), used in logs and reports."""
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            out[f.name] = to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out

