"""Shared vocabulary: identifiers, time windows, load bins and record types."""

from __future__ import annotations

import datetime as dt
import enum
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np


class DomainError(ValueError):
    """Raised when a value violates a domain precondition."""


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


class Level(enum.IntEnum):
    LOW = 0
    MEDIUM = 1
    MEDIUM_HIGH = 2
    HIGH = 3
    VERY_HIGH = 4

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    Level.LOW: "Low",
    Level.MEDIUM: "Medium",
    Level.MEDIUM_HIGH: "Medium-High",
    Level.HIGH: "High",
    Level.VERY_HIGH: "Very-High",
}

N_BINS = len(Level)


class Scheme(enum.Enum):
    TRIP = "trip"
    STOP = "stop"


# Inclusive upper bound of each level except the last (open-ended).
TRIP_UPPER = np.array([6, 12, 54, 75])
STOP_UPPER = np.array([5, 11, 16, 29])

# Load proxies used when a predicted stop bin has to stand in for a load.
STOP_BIN_MIDPOINTS = np.array([3.0, 8.5, 14.0, 23.0, 35.0])


@dataclass(frozen=True)
class LoadBin:
    level: Level
    scheme: Scheme

    def __int__(self) -> int:
        return int(self.level)


def _upper(scheme: Scheme) -> np.ndarray:
    return TRIP_UPPER if scheme is Scheme.TRIP else STOP_UPPER


def _bin(load: int, scheme: Scheme) -> LoadBin:
    if load < 0:
        raise DomainError(f"negative load {load}; clean records before binning")
    level = int(np.searchsorted(_upper(scheme), load, side="left"))
    return LoadBin(Level(level), scheme)


def bin_trip_load(load: int) -> LoadBin:
    return _bin(load, Scheme.TRIP)


def bin_stop_load(load: int) -> LoadBin:
    return _bin(load, Scheme.STOP)


def bin_levels(loads, scheme: Scheme) -> np.ndarray:
    """Vectorised binning; returns integer levels 0..4."""
    arr = np.asarray(loads)
    if arr.size and np.nanmin(arr) < 0:
        raise DomainError("negative load in input; clean records before binning")
    return np.searchsorted(_upper(scheme), arr, side="left").astype(np.int64)


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=float) + 0.5)


def prediction_levels(predictions, scheme: Scheme = Scheme.TRIP) -> np.ndarray:
    """Bin raw regression output: clamp at zero, round half-up, then bin."""
    loads = round_half_up(np.clip(np.asarray(predictions, dtype=float), 0.0, None))
    return bin_levels(loads, scheme)


def n_windows(width_minutes: int) -> int:
    if width_minutes <= 0:
        raise ConfigError(f"window width must be positive, got {width_minutes}")
    return math.ceil(1440 / width_minutes)


def time_window_of(timestamp: Union[dt.datetime, dt.time], width_minutes: int) -> int:
    n_windows(width_minutes)
    minutes = timestamp.hour * 60 + timestamp.minute
    return minutes // width_minutes


def time_windows(timestamps, width_minutes: int) -> np.ndarray:
    """Window index for a pandas datetime Series (vectorised ``time_window_of``)."""
    n_windows(width_minutes)
    minutes = timestamps.dt.hour.to_numpy() * 60 + timestamps.dt.minute.to_numpy()
    return (minutes // width_minutes).astype(np.int64)


class LowHigh(enum.IntEnum):
    LOW = 0
    HIGH = 1


LOW_HIGH_THRESHOLD = 12  # loads >= 12 are "high"


def low_high_of(value: Union[int, LoadBin]) -> LowHigh:
    """Collapse a raw load or a bin to the low/high split.

    Raw loads use the exact 11/12 cut. Trip bins straddle the cut (Medium is
    7-12), so Low and Medium map to LOW; stop bins align with it exactly.
    """
    if isinstance(value, LoadBin):
        return LowHigh.HIGH if value.level >= Level.MEDIUM_HIGH else LowHigh.LOW
    if value < 0:
        raise DomainError(f"negative load {value}")
    return LowHigh.HIGH if value >= LOW_HIGH_THRESHOLD else LowHigh.LOW


def low_high_levels(levels) -> np.ndarray:
    return (np.asarray(levels) >= int(Level.MEDIUM_HIGH)).astype(np.int64)


@dataclass(frozen=True)
class ApcRecord:
    transit_date: dt.date
    trip_id: str
    block_id: str
    route_id: str
    direction: str
    vehicle_id: str
    stop_id: str
    stop_sequence: int
    scheduled_arrival: dt.datetime
    actual_arrival: Optional[dt.datetime]
    ons: Optional[int]
    offs: Optional[int]
    load: Optional[int]
    scheduled_headway: float
    zero_load_at_trip_end: bool
    is_clean: bool = False


@dataclass(frozen=True)
class TripKey:
    transit_date: dt.date
    trip_id: str
    route_id: str
    direction: str
    time_window: int


@dataclass(frozen=True)
class TripAggregate:
    key: TripKey
    n_stops: int
    mean_temperature: Optional[float]
    mean_humidity: Optional[float]
    mean_precipitation: Optional[float]
    mean_scheduled_headway: float
    mean_traffic_speed: Optional[float]
    max_load: int
    target_bin: LoadBin
    is_holiday: bool
    is_school_break: bool
    year: int
    month: int
    day: int
    hour: int


@dataclass(frozen=True)
class StopObservation:
    transit_date: dt.date
    route_id: str
    direction: str
    stop_id: str
    stop_sequence: int
    time_window: int
    summed_load: int
    target_bin: LoadBin
    temperature: Optional[float] = None
    humidity: Optional[float] = None
    precipitation: Optional[float] = None
    traffic_speed: Optional[float] = None
    is_holiday: bool = False
    is_school_break: bool = False
    actual_headway: Optional[float] = None


@dataclass(frozen=True)
class EvalRecord:
    y_true: int
    y_pred: int

    @property
    def y_error(self) -> int:
        return self.y_true - self.y_pred

    def __post_init__(self):
        for v in (self.y_true, self.y_pred):
            if not 0 <= v < N_BINS:
                raise DomainError(f"bin level out of range: {v}")
