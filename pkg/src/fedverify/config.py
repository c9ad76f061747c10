"""Experiment configuration: nested dataclasses loaded from YAML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import TriggerSpec
from .errors import ConfigError
from .fed import FLConfig
from .unlearn import UnlearnConfig
from .verify import MarkConfig


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | idx | blob
    class_count: int = 10
    feature_dim: int = 64
    per_class: int = 200
    test_per_class: int = 50
    cluster_spread: float = 0.3
    rare_cluster_fraction: float = 0.05
    rare_clusters_per_class: int = 2
    rare_shift: float = 0.35
    partition: str = "iid"  # iid | dirichlet
    dirichlet_alpha: float = 0.5
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    downscale: bool = True
    blob: str | None = None
    test_blob: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "idx", "blob"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.partition not in ("iid", "dirichlet"):
            raise ConfigError(f"unknown partition {self.partition!r}")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (32,)
    activation: str = "relu"
    param_cap: int = 50_000


@dataclass(frozen=True)
class Timeline:
    T_enabled: int = 20
    t_m: int = 30
    t_u: int = 35
    t_leave: int = 55
    T_total: int = 60

    def __post_init__(self):
        if not 0 < self.T_enabled <= self.t_m < self.t_u < self.t_leave <= self.T_total:
            raise ConfigError(
                "timeline must satisfy 0 < T_enabled <= t_m < t_u < t_leave <= T_total, got "
                f"{self.T_enabled}, {self.t_m}, {self.t_u}, {self.t_leave}, {self.T_total}"
            )


@dataclass(frozen=True)
class CheckConfig:
    thresholds: dict = field(default_factory=dict)  # metric -> delta; missing ones use defaults
    bn_window: int = 3
    record_influence: bool = True
    damping: float = 0.01
    correlation_window: int = 10
    rebound_fraction: float = 0.5

    def __post_init__(self):
        for k, v in self.thresholds.items():
            if v <= 0:
                raise ConfigError(f"threshold for {k} must be positive")
        if self.bn_window < 1 or self.correlation_window < 1:
            raise ConfigError("windows must be positive")


@dataclass(frozen=True)
class AttackConfig:
    enabled: bool = False
    capture_round: int = 32
    replay_round: int = 40
    boost: float | None = None  # None: n_select, which cancels FedAvg's averaging

    def __post_init__(self):
        if self.enabled and not self.capture_round < self.replay_round:
            raise ConfigError("capture_round must precede replay_round")


@dataclass(frozen=True)
class DetectConfig:
    enabled: bool = False
    window: int = 3
    tol: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    leaver: int = 0
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    fl: FLConfig = FLConfig()
    timeline: Timeline = Timeline()
    unlearn: UnlearnConfig = UnlearnConfig()
    marking: MarkConfig = MarkConfig()
    check: CheckConfig = CheckConfig()
    attack: AttackConfig = AttackConfig()
    detect: DetectConfig = DetectConfig()

    def __post_init__(self):
        if self.fl.total_rounds != self.timeline.T_total:
            raise ConfigError(
                f"fl.total_rounds ({self.fl.total_rounds}) must equal "
                f"timeline.T_total ({self.timeline.T_total})"
            )
        if not 0 <= self.leaver < self.fl.n_total:
            raise ConfigError(f"leaver {self.leaver} outside [0, {self.fl.n_total})")
        if self.fl.seed != self.seed:
            object.__setattr__(self, "fl", dataclasses.replace(self.fl, seed=self.seed))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed, fl=dataclasses.replace(self.fl, seed=seed))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "fl": FLConfig,
    "timeline": Timeline,
    "unlearn": UnlearnConfig,
    "marking": MarkConfig,
    "check": CheckConfig,
    "attack": AttackConfig,
    "detect": DetectConfig,
}


def _build(cls, values, where):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(sorted(unknown))}")
    values = dict(values)
    if cls is MarkConfig and "trigger" in values:
        values["trigger"] = _build(TriggerSpec, values["trigger"], "marking.trigger")
    if cls is ModelConfig and "hidden" in values:
        values["hidden"] = tuple(values["hidden"])
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad value in {where!r}: {exc}") from exc


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a mapping")
    known = set(_SECTIONS) | {"seed", "leaver"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    parts = {name: _build(cls, d.get(name), name) for name, cls in _SECTIONS.items()}
    seed = int(d.get("seed", 0))
    parts["fl"] = dataclasses.replace(parts["fl"], seed=seed)
    return ExperimentConfig(seed=seed, leaver=int(d.get("leaver", 0)), **parts)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
