"""Statistical comparison models: trip history max, rolling stop, stop history mean/max.

Every prediction is a bin level, or ``ABSTAIN`` (-1) when no matching
history exists.
"""

from __future__ import annotations

from bisect import bisect_left
from typing import Dict, Hashable, Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from tlf.domain import ConfigError, Scheme, bin_levels, round_half_up

ABSTAIN = -1
TRIP_KEY = ("route_id", "direction", "time_window", "day_of_week")
STOP_KEY = ("route_id", "direction", "time_window", "day_of_week", "stop_id")
LOOKBACK_WEEKS = (1, 2, 4)


class HistoryIndex:
    """(route, direction, window, weekday[, stop]) -> date-sorted past values.

    Queries only ever see values dated strictly before the query date.
    """

    def __init__(self, key_columns: Sequence[str]):
        self.key_columns = tuple(key_columns)
        self._dates: Dict[Hashable, np.ndarray] = {}
        self._values: Dict[Hashable, np.ndarray] = {}

    @classmethod
    def build(cls, rows: pd.DataFrame, key_columns: Sequence[str], value_column: str) -> "HistoryIndex":
        idx = cls(key_columns)
        frame = rows[list(key_columns) + ["transit_date", value_column]]
        frame = frame.sort_values(list(key_columns) + ["transit_date"], kind="stable")
        dates = frame["transit_date"].to_numpy("datetime64[D]")
        values = frame[value_column].to_numpy(dtype=float)
        for key, pos in frame.groupby(list(key_columns), sort=False).indices.items():
            key = key if isinstance(key, tuple) else (key,)
            idx._dates[_norm(key)] = dates[pos]
            idx._values[_norm(key)] = values[pos]
        return idx

    def __len__(self) -> int:
        return len(self._dates)

    def lookup(self, key: Tuple, before, since=None) -> np.ndarray:
        """Values with ``since <= date < before``."""
        key = _norm(key)
        dates = self._dates.get(key)
        if dates is None:
            return np.zeros(0)
        before = np.datetime64(pd.Timestamp(before).date(), "D")
        hi = np.searchsorted(dates, before, side="left")
        lo = 0 if since is None else np.searchsorted(dates, np.datetime64(pd.Timestamp(since).date(), "D"),
                                                     side="left")
        return self._values[key][lo:hi]


def _norm(key: Iterable) -> Tuple:
    out = []
    for k in key:
        if isinstance(k, (bool, np.bool_)):
            k = int(k)
        elif isinstance(k, (int, np.integer)):
            k = int(k)
        elif isinstance(k, (float, np.floating)) and float(k).is_integer():
            k = int(k)
        else:
            k = str(k)
        out.append(k)
    return tuple(out)


def trip_baseline(history: HistoryIndex, key: Tuple, query_date, lookback_weeks: int = 1) -> int:
    """Bin of the largest max-load among matching trips in the past ``lookback_weeks`` weeks."""
    if lookback_weeks < 1:
        raise ConfigError("lookback must be at least one week")
    q = pd.Timestamp(query_date)
    past = history.lookup(key, q, q - pd.Timedelta(weeks=lookback_weeks))
    if not len(past):
        return ABSTAIN
    return int(bin_levels([int(past.max())], Scheme.TRIP)[0])


def trip_baseline_frame(history: HistoryIndex, queries: pd.DataFrame, lookback_weeks: int = 1) -> np.ndarray:
    cols = [queries[c].to_numpy() for c in history.key_columns]
    dates = queries["transit_date"].to_numpy()
    return np.array([trip_baseline(history, tuple(c[i] for c in cols), dates[i], lookback_weeks)
                     for i in range(len(queries))], dtype=np.int64)


def rolling_stop_baseline(current_level: int, horizon: int = 1) -> int:
    """Next stop's bin is the current stop's bin; abstains beyond one stop ahead."""
    return int(current_level) if horizon == 1 else ABSTAIN


def statistical_stop_baseline(history: HistoryIndex, key: Tuple, query_date, mode: str = "mean",
                              lookback_weeks: Optional[int] = None) -> int:
    """Bin of the mean (rounded half-up) or max of matching past summed loads."""
    if mode not in ("mean", "max"):
        raise ConfigError(f"unknown baseline mode {mode!r}")
    q = pd.Timestamp(query_date)
    since = None if lookback_weeks is None else q - pd.Timedelta(weeks=lookback_weeks)
    past = history.lookup(key, q, since)
    if not len(past):
        return ABSTAIN
    value = round_half_up(past.mean()) if mode == "mean" else past.max()
    return int(bin_levels([int(value)], Scheme.STOP)[0])


def stop_baseline_frame(history: HistoryIndex, queries: pd.DataFrame, mode: str = "mean",
                        lookback_weeks: Optional[int] = None) -> np.ndarray:
    cols = [queries[c].to_numpy() for c in history.key_columns]
    dates = queries["transit_date"].to_numpy()
    return np.array([statistical_stop_baseline(history, tuple(c[i] for c in cols), dates[i], mode,
                                               lookback_weeks)
                     for i in range(len(queries))], dtype=np.int64)


def trip_history(trips: pd.DataFrame) -> HistoryIndex:
    return HistoryIndex.build(trips, TRIP_KEY, "max_load")


def stop_history(stops: pd.DataFrame) -> HistoryIndex:
    return HistoryIndex.build(stops, STOP_KEY, "summed_load")
