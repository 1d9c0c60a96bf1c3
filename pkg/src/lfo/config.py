"""Experiment configuration: one JSON document, every section optional, unknown keys rejected.

Stage seeds are derived from the master seed plus a fixed per-stage offset,
so a single ``seed`` controls the whole pipeline.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .localizer import BaselineConfig, LocalizerConfig
from .reacher import EnvConfig
from .reward import RewardConfig
from .rl import BCConfig, PPOConfig, RLConfig

STAGE_OFFSETS = {
    "train_data": 1, "validation_data": 2, "meta_test_data": 3, "auxiliary_data": 4,
    "demo": 5, "heldout": 6,
    "localizer": 10, "baseline": 11, "reward": 20, "policy": 30, "evaluate": 40,
}


@dataclass
class DataConfig:
    train_colors: tuple = (0, 1, 2, 3)
    meta_colors: tuple = (4, 5, 6, 7)
    K: int = 2
    train_videos: int = 10
    validation_videos: int = 4
    meta_test_videos: int = 4
    auxiliary_videos: int = 120
    heldout_videos: int = 10
    target_task: tuple = (0, 1)


@dataclass
class PipelineConfig:
    trials: int = 100
    policy_subtasks: tuple = (0, 1)
    threshold: float = None


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    seed: int = 0
    tag: str = "desk"

    def stage_seed(self, stage):
        return self.seed + STAGE_OFFSETS[stage]

    def to_dict(self):
        return _to_plain(self)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


_NESTED = {"ppo": PPOConfig, "bc_config": BCConfig}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and cls is RLConfig:
            value = _build(_NESTED[key], value, f"{where}.{key}")
        elif isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    "env": EnvConfig, "data": DataConfig, "localizer": LocalizerConfig,
    "baseline": BaselineConfig, "reward": RewardConfig, "rl": RLConfig, "pipeline": PipelineConfig,
}


def config_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(d) - set(_SECTIONS) - {"seed", "tag"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    kwargs = {name: _build(cls, d[name], name) for name, cls in _SECTIONS.items() if name in d}
    if "seed" in d:
        if not isinstance(d["seed"], int):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = d["seed"]
    if "tag" in d:
        kwargs["tag"] = str(d["tag"])
    return ExperimentConfig(**kwargs)


def load_config(path):
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def config_dump(config):
    """All values, defaults included, as formatted JSON."""
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
