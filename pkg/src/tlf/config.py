"""Pipeline configuration: JSON file -> nested dataclasses with strict key checks."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from tlf.clean import CleanThresholds
from tlf.domain import ConfigError, n_windows
from tlf.gbt import GbtHyperparams
from tlf.seq2seq import Seq2SeqConfig
from tlf.synth import NoiseConfig, SynthConfig

LEVELS = ("trip-anyday", "trip-dayahead", "stop")


@dataclass(frozen=True)
class InputConfig:
    """Input files; any left null is taken from ``<out>/synth``."""

    apc: Optional[str] = None
    gtfs: Optional[str] = None
    weather: Optional[List[str]] = None
    traffic: Optional[str] = None
    segments: Optional[str] = None
    calendar: Optional[str] = None
    apc_columns: Optional[Dict[str, str]] = None


@dataclass(frozen=True)
class FeatureConfig:
    p: int = 5
    day_feature: str = "day"
    trip_split_ratio: float = 0.7
    stop_split_fractions: List[float] = field(default_factory=lambda: [0.6, 0.15, 0.25])
    train_end: Optional[str] = None
    validation_end: Optional[str] = None


@dataclass(frozen=True)
class GbtConfig:
    params: GbtHyperparams = field(default_factory=GbtHyperparams)
    cv_folds: int = 5
    grid_search: bool = False
    grid: Dict[str, List[Any]] = field(default_factory=lambda: {
        "max_depth": [3, 6, 9], "n_trees": [100, 300], "learning_rate": [0.05, 0.1, 0.3]})


@dataclass(frozen=True)
class EvalConfig:
    n_eval_trips: int = 5000
    min_trip_stops: int = 10
    max_horizon: int = 5
    lookback_weeks: List[int] = field(default_factory=lambda: [1, 2, 4])
    stop_baseline_mode: str = "mean"
    stop_lookback_weeks: Optional[int] = 4
    max_next_stop_samples: int = 20000


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 7
    out: str = "out"
    window_minutes: int = 30
    stop_window_minutes: int = 15
    inputs: InputConfig = field(default_factory=InputConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    clean: CleanThresholds = field(default_factory=CleanThresholds)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    gbt: GbtConfig = field(default_factory=GbtConfig)
    seq2seq: Seq2SeqConfig = field(default_factory=Seq2SeqConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "PipelineConfig":
        n_windows(self.window_minutes)
        n_windows(self.stop_window_minutes)
        self.synth.validate()
        if self.features.p < 1:
            raise ConfigError("features.p must be >= 1")
        if self.features.day_feature not in ("day", "day_of_week", "both"):
            raise ConfigError("features.day_feature must be day, day_of_week or both")
        if not 0 < self.features.trip_split_ratio < 1:
            raise ConfigError("features.trip_split_ratio must lie in (0, 1)")
        if self.gbt.cv_folds < 2:
            raise ConfigError("gbt.cv_folds must be >= 2")
        if self.eval.stop_baseline_mode not in ("mean", "max"):
            raise ConfigError("eval.stop_baseline_mode must be mean or max")
        if self.eval.max_horizon < 1:
            raise ConfigError("eval.max_horizon must be >= 1")
        if self.eval.min_trip_stops < self.seq2seq.n_past + self.eval.max_horizon:
            raise ConfigError("eval.min_trip_stops must cover n_past + max_horizon stops")
        return self

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Set the single seed and copy it into every section that carries one."""
        return dataclasses.replace(
            self, seed=seed,
            synth=dataclasses.replace(self.synth, seed=seed),
            gbt=dataclasses.replace(self.gbt, params=dataclasses.replace(self.gbt.params, seed=seed)),
            seq2seq=dataclasses.replace(self.seq2seq, seed=seed),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {'.'.join(filter(None, [where, unknown[0]]))!r}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        kwargs[name] = _build(hint, value, f"{where}.{name}" if where else name) \
            if dataclasses.is_dataclass(hint) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(data: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, data, "")
    return cfg.with_seed(cfg.seed).validate()


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text() or "{}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def default_config_dict() -> dict:
    return PipelineConfig().to_dict()


__all__ = ["PipelineConfig", "InputConfig", "FeatureConfig", "GbtConfig", "EvalConfig", "NoiseConfig",
           "LEVELS", "load_config", "from_dict", "default_config_dict"]
