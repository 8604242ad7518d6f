"""Feature encoding, day-ahead history features, sequence ordering and splits."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from tlf.domain import ConfigError

log = logging.getLogger(__name__)

EPS = 1e-6
PC_CAP = 100.0
DEFAULT_P = 5

NUMERICAL = "numerical"
ONE_HOT = "one-hot"
ORDINAL = "ordinal"
CATEGORIES = (NUMERICAL, ONE_HOT, ORDINAL)

TRIP_NUMERICAL = ["mean_temperature", "mean_humidity", "mean_precipitation", "mean_traffic_speed",
                  "mean_scheduled_headway", "mean_actual_headway"]
DAY_AHEAD_NUMERICAL = ["pc_load", "pc_headway", "avg_load_p", "avg_headway_p"]
STOP_NUMERICAL = ["temperature", "humidity", "precipitation", "traffic_speed",
                  "scheduled_headway", "actual_headway"]
ONE_HOT_FEATURES = ["is_holiday", "is_school_break", "zero_load_at_trip_end", "route_direction",
                    "time_window"]
ORDINAL_FEATURES = ["year", "month", "day", "hour", "day_of_week"]


def percent_change(prev2, prev1):
    """(prev1 - prev2) / max(|prev2|, eps), capped to +/-100; null in, null out."""
    p2 = np.asarray(prev2, dtype=float)
    p1 = np.asarray(prev1, dtype=float)
    with np.errstate(invalid="ignore"):
        out = np.clip((p1 - p2) / np.maximum(np.abs(p2), EPS), -PC_CAP, PC_CAP)
    return out if out.ndim else float(out)


# --- day-ahead -------------------------------------------------------------

@dataclass(frozen=True)
class DayAheadFeatures:
    pc_load: float
    pc_headway: float
    avg_load_p: float
    avg_headway_p: float
    p: int


def _nanmean(values: np.ndarray) -> float:
    values = values[~np.isnan(values)]
    return float(values.mean()) if len(values) else float("nan")


def _features_from_prior(loads: np.ndarray, headways: np.ndarray) -> DayAheadFeatures:
    """``loads``/``headways`` of prior trips, most recent last."""
    n = len(loads)
    if n >= 2:
        pc_l = percent_change(loads[-2], loads[-1])
        pc_h = percent_change(headways[-2], headways[-1])
    else:
        pc_l = pc_h = float("nan")
    return DayAheadFeatures(pc_l, pc_h, _nanmean(loads), _nanmean(headways), n)


def prior_trip_indices(start: np.ndarray, end: np.ndarray, target_start, p: int,
                       horizon=np.timedelta64(24, "h")) -> List[int]:
    """Indices of up to ``p`` trips that ended before ``target_start`` and started
    within the preceding 24 h, ordered by end time (most recent last)."""
    ok = (end < target_start) & (start >= target_start - horizon)
    idx = np.flatnonzero(ok)
    idx = idx[np.lexsort((start[idx], end[idx]))]
    return list(idx[-p:]) if p > 0 else []


def build_day_ahead_features(history: pd.DataFrame, target_start, p: int = DEFAULT_P) -> DayAheadFeatures:
    """Features for a trip starting at ``target_start`` from same route/direction ``history``."""
    start = history["trip_start"].to_numpy("datetime64[ns]")
    end = history["trip_end"].to_numpy("datetime64[ns]")
    idx = prior_trip_indices(start, end, np.datetime64(pd.Timestamp(target_start)), p)
    return _features_from_prior(history["max_load"].to_numpy(float)[idx],
                                history["mean_actual_headway"].to_numpy(float)[idx])


def add_day_ahead_features(trips: pd.DataFrame, p: int = DEFAULT_P) -> pd.DataFrame:
    """Append pc_load, pc_headway, avg_load_p, avg_headway_p and p_used to every trip row."""
    if p < 1:
        raise ConfigError("P must be at least 1")
    out = trips.copy()
    cols = {c: np.full(len(out), np.nan) for c in DAY_AHEAD_NUMERICAL}
    p_used = np.zeros(len(out), dtype=np.int64)
    horizon = np.timedelta64(24, "h")
    for _, idx in out.groupby(["route_id", "direction"], sort=True).indices.items():
        start = out["trip_start"].to_numpy("datetime64[ns]")[idx]
        end = out["trip_end"].to_numpy("datetime64[ns]")[idx]
        loads = out["max_load"].to_numpy(float)[idx]
        heads = out["mean_actual_headway"].to_numpy(float)[idx]
        order = np.lexsort((start, end))
        end_sorted = end[order]
        for k, row in enumerate(idx):
            t = start[k]
            hi = np.searchsorted(end_sorted, t, side="left")
            chosen = []
            j = hi - 1
            while j >= 0 and len(chosen) < p:
                cand = order[j]
                if end_sorted[j] < t - horizon:
                    break
                if start[cand] >= t - horizon:
                    chosen.append(cand)
                j -= 1
            chosen.reverse()
            f = _features_from_prior(loads[chosen], heads[chosen])
            cols["pc_load"][row] = f.pc_load
            cols["pc_headway"][row] = f.pc_headway
            cols["avg_load_p"][row] = f.avg_load_p
            cols["avg_headway_p"][row] = f.avg_headway_p
            p_used[row] = f.p
    for c, v in cols.items():
        out[c] = v
    out["p_used"] = p_used
    return out


# --- schema / encoding -----------------------------------------------------

def add_derived_columns(frame: pd.DataFrame) -> pd.DataFrame:
    """route_direction combines route and direction into one categorical."""
    if "route_direction" in frame:
        return frame
    return frame.assign(route_direction=frame["route_id"].astype(str) + "|" + frame["direction"].astype(str))


def _category_key(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)) and float(value).is_integer():
        return str(int(value))
    return str(value)


def _level_order(key: str):
    try:
        return (0, int(key), "")
    except ValueError:
        return (1, 0, key)


@dataclass
class FeatureSchema:
    """Ordered features with per-category encoding parameters fitted on training rows."""

    numerical: List[str]
    one_hot: List[str]
    ordinal: List[str]
    means: Dict[str, float] = field(default_factory=dict)
    sds: Dict[str, float] = field(default_factory=dict)
    levels: Dict[str, List[str]] = field(default_factory=dict)
    ordinal_range: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    scale_ordinal: bool = False

    @classmethod
    def fit(cls, rows: pd.DataFrame, numerical: Sequence[str], one_hot: Sequence[str],
            ordinal: Sequence[str], scale_ordinal: bool = False) -> "FeatureSchema":
        rows = add_derived_columns(rows)
        schema = cls(list(numerical), list(one_hot), list(ordinal), scale_ordinal=scale_ordinal)
        for c in schema.numerical:
            v = rows[c].to_numpy(dtype=float)
            v = v[~np.isnan(v)]
            schema.means[c] = float(v.mean()) if len(v) else 0.0
            schema.sds[c] = float(v.std()) if len(v) else 0.0
            if schema.sds[c] == 0.0:
                log.warning("feature %s has zero variance in training rows; encoded as zeros", c)
        for c in schema.one_hot:
            schema.levels[c] = sorted({_category_key(v) for v in rows[c].dropna()}, key=_level_order)
        for c in schema.ordinal:
            v = rows[c].to_numpy(dtype=float)
            schema.ordinal_range[c] = (float(np.nanmin(v)), float(np.nanmax(v))) if len(v) else (0.0, 0.0)
        return schema

    @property
    def columns(self) -> List[str]:
        cols = list(self.numerical)
        for c in self.one_hot:
            cols += [f"{c}={lvl}" for lvl in self.levels[c]]
        cols += list(self.ordinal)
        return cols

    def category_of(self, column: str) -> str:
        base = column.split("=", 1)[0]
        if base in self.numerical and "=" not in column:
            return NUMERICAL
        if base in self.one_hot:
            return ONE_HOT
        return ORDINAL

    def encode(self, rows: pd.DataFrame, diagnostics: Optional[list] = None) -> np.ndarray:
        """Encode rows into a float64 matrix with ``self.columns`` order."""
        rows = add_derived_columns(rows)
        n = len(rows)
        blocks = []
        for c in self.numerical:
            v = rows[c].to_numpy(dtype=float)
            v = np.where(np.isnan(v), self.means[c], v)
            sd = self.sds[c]
            blocks.append(((v - self.means[c]) / sd if sd > 0 else np.zeros(n))[:, None])
        for c in self.one_hot:
            lv = self.levels[c]
            pos = {k: i for i, k in enumerate(lv)}
            keys = rows[c].map(_category_key, na_action="ignore")
            where = keys.map(pos).to_numpy(dtype=float)
            block = np.zeros((n, len(lv)))
            known = ~np.isnan(where)
            block[np.flatnonzero(known), where[known].astype(np.int64)] = 1.0
            unknown = int((~known & rows[c].notna().to_numpy()).sum())
            if unknown:
                msg = f"{unknown} rows with unseen {c} category encoded as all-zeros"
                log.info(msg)
                if diagnostics is not None:
                    diagnostics.append({"feature": c, "reason": "unseen category", "count": unknown})
            blocks.append(block)
        for c in self.ordinal:
            v = rows[c].to_numpy(dtype=float)
            if self.scale_ordinal:
                lo, hi = self.ordinal_range[c]
                v = (v - lo) / (hi - lo) if hi > lo else np.zeros(n)
            blocks.append(v[:, None])
        return np.hstack(blocks) if blocks else np.zeros((n, 0))

    def to_dict(self) -> dict:
        return {
            "numerical": self.numerical, "one_hot": self.one_hot, "ordinal": self.ordinal,
            "means": self.means, "sds": self.sds, "levels": self.levels,
            "ordinal_range": {k: list(v) for k, v in self.ordinal_range.items()},
            "scale_ordinal": self.scale_ordinal,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(list(d["numerical"]), list(d["one_hot"]), list(d["ordinal"]),
                   dict(d["means"]), dict(d["sds"]), {k: list(v) for k, v in d["levels"].items()},
                   {k: tuple(v) for k, v in d["ordinal_range"].items()}, bool(d["scale_ordinal"]))


def trip_schema(rows: pd.DataFrame, day_ahead: bool = False, day_feature: str = "day") -> FeatureSchema:
    numerical = TRIP_NUMERICAL + (DAY_AHEAD_NUMERICAL if day_ahead else [])
    return FeatureSchema.fit(rows, numerical, ONE_HOT_FEATURES, _ordinals(day_feature))


def _ordinals(day_feature: str) -> List[str]:
    if day_feature == "day":
        return ["year", "month", "day", "hour"]
    if day_feature == "day_of_week":
        return ["year", "month", "day_of_week", "hour"]
    if day_feature == "both":
        return list(ORDINAL_FEATURES)
    raise ConfigError(f"unknown day feature {day_feature!r}")


# --- sequences -------------------------------------------------------------

SEQUENCE_KEYS = ["transit_date", "route_id", "direction", "block_id"]
SEQUENCE_ORDER = SEQUENCE_KEYS + ["trip_start", "stop_sequence"]


def sort_sequences(stops: pd.DataFrame, diagnostics: Optional[list] = None) -> pd.DataFrame:
    """Order stop rows by (date, route, direction, block, trip start, stop sequence).

    Rows missing an ordering key are dropped. A ``sequence_id`` column numbers
    the (date, route, direction, block) sequences in output order.
    """
    missing = stops[SEQUENCE_ORDER].isna().any(axis=1)
    if missing.any():
        log.info("sort_sequences: %d rows without ordering keys dropped", int(missing.sum()))
        if diagnostics is not None:
            diagnostics.append({"reason": "missing ordering key", "count": int(missing.sum())})
    out = stops.loc[~missing].sort_values(SEQUENCE_ORDER + ["time_window", "stop_id"], kind="stable")
    out = out.reset_index(drop=True)
    out["sequence_id"] = out.groupby(SEQUENCE_KEYS, sort=False).ngroup()
    return out


# --- splits ----------------------------------------------------------------

def split_trip_data(rows: pd.DataFrame, ratio: float = 0.7, seed: int = 0) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Seeded uniform split; train gets round(ratio * n) rows. Both parts keep input order."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError("split ratio must lie in [0, 1]")
    n = len(rows)
    n_train = int(np.floor(ratio * n + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    mask = np.zeros(n, dtype=bool)
    mask[perm[:n_train]] = True
    return rows.iloc[np.flatnonzero(mask)], rows.iloc[np.flatnonzero(~mask)]


@dataclass(frozen=True)
class SplitBoundaries:
    """Half-open date intervals: train <= train_end < validation <= validation_end < test."""

    train_end: pd.Timestamp
    validation_end: pd.Timestamp

    @classmethod
    def from_fractions(cls, dates, fractions=(0.6, 0.15, 0.25)) -> "SplitBoundaries":
        if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
            raise ConfigError("split fractions must be three non-negative numbers summing to 1")
        d = pd.to_datetime(pd.Series(dates))
        first, last = d.min().normalize(), d.max().normalize()
        n_days = (last - first).days + 1
        a = int(np.floor(fractions[0] * n_days + 0.5))
        b = int(np.floor((fractions[0] + fractions[1]) * n_days + 0.5))
        return cls(first + pd.Timedelta(days=a - 1), first + pd.Timedelta(days=b - 1))


def split_stop_data(rows: pd.DataFrame, boundaries: Optional[SplitBoundaries] = None,
                    fractions=(0.6, 0.15, 0.25)) -> Tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    """Chronological train/validation/test split on ``transit_date``."""
    if boundaries is None:
        boundaries = SplitBoundaries.from_fractions(rows["transit_date"], fractions)
    if boundaries.validation_end < boundaries.train_end:
        raise ConfigError("validation end precedes train end")
    d = rows["transit_date"]
    train = rows[d <= boundaries.train_end]
    val = rows[(d > boundaries.train_end) & (d <= boundaries.validation_end)]
    test = rows[d > boundaries.validation_end]
    if val.empty:
        raise ConfigError("validation window is empty")
    return train, val, test


# --- persistence -----------------------------------------------------------

def write_matrix(path, matrix: np.ndarray, columns: Sequence[str], target: Optional[np.ndarray] = None,
                 provenance: Optional[dict] = None) -> Path:
    """Row-major little-endian float32 matrix plus a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2 or m.shape[1] != len(columns):
        raise ValueError("matrix shape does not match column list")
    path.write_bytes(m.tobytes(order="C"))
    meta = {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "dtype": "<f4", "order": "C",
            "columns": list(columns)}
    if target is not None:
        tpath = path.with_name(path.name + ".target")
        tpath.write_bytes(np.ascontiguousarray(target, dtype="<f4").tobytes())
        meta["target_file"] = tpath.name
    if provenance is not None:
        meta["provenance"] = provenance
    path.with_name(path.name + ".json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return path


def read_matrix(path) -> Tuple[np.ndarray, List[str], Optional[np.ndarray]]:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    m = np.frombuffer(path.read_bytes(), dtype=meta["dtype"]).reshape(meta["rows"], meta["cols"])
    target = None
    if "target_file" in meta:
        target = np.frombuffer((path.parent / meta["target_file"]).read_bytes(), dtype="<f4")
    return m, meta["columns"], target


def matrix_to_csv(matrix: np.ndarray, columns: Sequence[str], path) -> Path:
    from tlf.io import write_csv

    return write_csv(pd.DataFrame(np.asarray(matrix), columns=list(columns)), path,
                     float_format="%.7g")
