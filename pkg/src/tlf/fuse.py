"""Spatiotemporal joins (weather, traffic, calendar), headways and aggregation."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from shapely.geometry import LineString, box
from shapely.geometry.base import BaseGeometry

from tlf.domain import Scheme, bin_levels, time_windows
from tlf.geo import MILE_M, LocalProjection, haversine_m
from tlf.ingest import GtfsBundle

log = logging.getLogger(__name__)

WEATHER_FALLBACK_HOURS = (0, -1, 1, -2, 2, -3, 3)
TRAFFIC_FALLBACK_SLOTS = 3  # 15 minutes back


@dataclass
class Diagnostics:
    entries: List[dict] = field(default_factory=list)

    def add(self, stage: str, reason: str, count: int, example=None):
        if count:
            self.entries.append({"stage": stage, "reason": reason, "count": int(count),
                                 "example": None if example is None else str(example)})
            log.info("%s: %s (%d rows)", stage, reason, count)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.entries, columns=["stage", "reason", "count", "example"])


# --- weather ---------------------------------------------------------------

def station_table(weather: pd.DataFrame) -> pd.DataFrame:
    st = weather.drop_duplicates("station_id")[["station_id", "latitude", "longitude"]]
    return st.sort_values("station_id", kind="stable").reset_index(drop=True)


def nearest_station(lat, lon, stations: pd.DataFrame) -> np.ndarray:
    """Index into ``stations`` (sorted by id) of the nearest station; ties go to the lower id."""
    d = haversine_m(np.asarray(lat, float)[:, None], np.asarray(lon, float)[:, None],
                    stations["latitude"].to_numpy()[None, :], stations["longitude"].to_numpy()[None, :])
    return np.argmin(d, axis=1)


def join_weather(records: pd.DataFrame, weather: pd.DataFrame, stops: pd.DataFrame,
                 diagnostics: Optional[Diagnostics] = None) -> pd.DataFrame:
    """Attach temperature/humidity/precipitation from the nearest station at the scheduled hour.

    A missing station-hour falls back to the nearest hour within three hours
    (earlier first on ties); beyond that the values are null.
    """
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    out = records.copy()
    stations = station_table(weather)
    stop_pos = stops.set_index("stop_id")[["stop_lat", "stop_lon"]]
    known_stop = out["stop_id"].isin(stop_pos.index).to_numpy()
    diagnostics.add("weather", "stop missing from GTFS stops", int((~known_stop).sum()))
    uniq = pd.Index(out["stop_id"].unique())
    uniq = uniq[uniq.isin(stop_pos.index)]
    near = pd.Series(nearest_station(stop_pos.loc[uniq, "stop_lat"], stop_pos.loc[uniq, "stop_lon"],
                                     stations), index=uniq)
    st_idx = out["stop_id"].map(near).fillna(-1).to_numpy(dtype=np.int64)

    t0 = weather["timestamp"].min()
    n_hours = int((weather["timestamp"].max() - t0) / pd.Timedelta(hours=1)) + 1
    sidx = weather["station_id"].map(pd.Series(np.arange(len(stations)), index=stations["station_id"]))
    hidx = ((weather["timestamp"] - t0) / pd.Timedelta(hours=1)).astype(np.int64).to_numpy()
    present = np.zeros((len(stations), n_hours), dtype=bool)
    present[sidx.to_numpy(), hidx] = True
    fields = {"temperature": "temperature", "humidity": "humidity",
              "precipitation_intensity": "precipitation"}
    grids = {}
    for src in fields:
        grid = np.full((len(stations), n_hours), np.nan)
        grid[sidx.to_numpy(), hidx] = weather[src].to_numpy(dtype=float)
        grids[src] = grid

    hour = ((out["scheduled_arrival"].dt.floor("h") - t0) / pd.Timedelta(hours=1)).to_numpy()
    hour = np.where(np.isnan(hour), -10**9, hour).astype(np.int64)
    chosen = np.full(len(out), -1, dtype=np.int64)
    for off in WEATHER_FALLBACK_HOURS:
        h = hour + off
        ok = (chosen < 0) & (st_idx >= 0) & (h >= 0) & (h < n_hours)
        ok[ok] = present[st_idx[ok], h[ok]]
        chosen[ok] = h[ok]
    found = chosen >= 0
    fallback = found & (chosen != hour)
    diagnostics.add("weather", "used neighbouring hour (within 3h)", int(fallback.sum()))
    diagnostics.add("weather", "no observation within 3h; null weather", int((~found & known_stop).sum()))
    for src, dst in fields.items():
        vals = np.full(len(out), np.nan)
        vals[found] = grids[src][st_idx[found], chosen[found]]
        out[dst] = vals
    return out


# --- traffic ---------------------------------------------------------------

class GridIndex:
    """One-mile square cells in a local projection, mapped to the segments crossing them."""

    def __init__(self, projection: LocalProjection, cell_m: float = MILE_M):
        self.projection = projection
        self.cell_m = cell_m
        self.cells: Dict[Tuple[int, int], List[str]] = defaultdict(list)

    def _project(self, geom: BaseGeometry) -> LineString:
        lon, lat = np.asarray(geom.coords).T
        x, y = self.projection.to_xy(lat, lon)
        if len(x) == 1:
            return LineString([(x[0], y[0]), (x[0], y[0])])
        return LineString(np.column_stack([x, y]))

    def cells_of(self, geom: BaseGeometry) -> List[Tuple[int, int]]:
        """Cells intersected by a lon/lat line geometry."""
        line = self._project(geom)
        minx, miny, maxx, maxy = line.bounds
        c = self.cell_m
        hits = []
        for i in range(int(np.floor(minx / c)), int(np.floor(maxx / c)) + 1):
            for j in range(int(np.floor(miny / c)), int(np.floor(maxy / c)) + 1):
                if line.intersects(box(i * c, j * c, (i + 1) * c, (j + 1) * c)):
                    hits.append((i, j))
        return hits

    @classmethod
    def build(cls, segments: pd.DataFrame, projection: LocalProjection, cell_m: float = MILE_M):
        grid = cls(projection, cell_m)
        for seg_id, geom in zip(segments["segment_id"], segments["geometry"]):
            for cell in grid.cells_of(geom):
                grid.cells[cell].append(seg_id)
        for cell in grid.cells:
            grid.cells[cell] = sorted(set(grid.cells[cell]))
        return grid

    def segments_for(self, geom: BaseGeometry) -> List[str]:
        found = set()
        for cell in self.cells_of(geom):
            found.update(self.cells.get(cell, ()))
        return sorted(found)


def network_projection(stops: pd.DataFrame) -> LocalProjection:
    return LocalProjection(stops["stop_lat"].mean(), stops["stop_lon"].mean())


def shape_geometries(gtfs: GtfsBundle) -> Dict[str, LineString]:
    out = {}
    for sid, part in gtfs.shapes.groupby("shape_id", sort=True):
        coords = list(zip(part["shape_pt_lon"], part["shape_pt_lat"]))
        out[sid] = LineString(coords if len(coords) > 1 else coords * 2)
    return out


def join_traffic(records: pd.DataFrame, gtfs: GtfsBundle, traffic: pd.DataFrame,
                 segments: pd.DataFrame, grid: Optional[GridIndex] = None,
                 diagnostics: Optional[Diagnostics] = None) -> pd.DataFrame:
    """Mean speed over the segments in every cell the trip's shape crosses.

    The reading is taken at the 5-minute slot of each record's scheduled
    arrival; a missing reading falls back to the previous slot up to 15
    minutes back, per segment.
    """
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    out = records.copy()
    if grid is None:
        grid = GridIndex.build(segments, network_projection(gtfs.stops))
    shapes = shape_geometries(gtfs)
    trip_shape = gtfs.trips.set_index("trip_id")["shape_id"] if "shape_id" in gtfs.trips else None
    if trip_shape is None:
        diagnostics.add("traffic", "GTFS trips carry no shape_id; null speed", len(out))
        out["traffic_speed"] = np.nan
        return out
    shape_ids = sorted(shapes)
    seg_index = {s: i for i, s in enumerate(segments["segment_id"])}

    t0 = traffic["timestamp"].min()
    n_slots = int((traffic["timestamp"].max() - t0) / pd.Timedelta(minutes=5)) + 1
    speed = np.full((len(seg_index), n_slots), np.nan)
    known = traffic["segment_id"].isin(seg_index)
    si = traffic.loc[known, "segment_id"].map(seg_index).to_numpy()
    ti = ((traffic.loc[known, "timestamp"] - t0) / pd.Timedelta(minutes=5)).astype(np.int64).to_numpy()
    speed[si, ti] = traffic.loc[known, "speed"].to_numpy(dtype=float)
    speed = pd.DataFrame(speed.T).ffill(limit=TRAFFIC_FALLBACK_SLOTS).to_numpy().T

    shape_speed = np.full((len(shape_ids), n_slots), np.nan)
    for k, sid in enumerate(shape_ids):
        segs = [seg_index[s] for s in grid.segments_for(shapes[sid])]
        if segs:
            block = speed[segs]
            cnt = np.sum(~np.isnan(block), axis=0)
            tot = np.nansum(block, axis=0)
            with np.errstate(invalid="ignore", divide="ignore"):
                shape_speed[k] = np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)

    shape_of = out["trip_id"].map(trip_shape)
    k = shape_of.map(pd.Series(np.arange(len(shape_ids)), index=shape_ids)).fillna(-1).to_numpy(np.int64)
    slot = ((out["scheduled_arrival"].dt.floor("5min") - t0) / pd.Timedelta(minutes=5)).to_numpy()
    slot = np.where(np.isnan(slot), -1, slot).astype(np.int64)
    ok = (k >= 0) & (slot >= 0) & (slot < n_slots)
    vals = np.full(len(out), np.nan)
    vals[ok] = shape_speed[k[ok], slot[ok]]
    out["traffic_speed"] = vals
    diagnostics.add("traffic", "no segment reading for trip shape/slot; null speed",
                    int(np.isnan(vals).sum()))
    return out


# --- calendar --------------------------------------------------------------

def join_calendar(records: pd.DataFrame, calendar: pd.DataFrame,
                  diagnostics: Optional[Diagnostics] = None) -> pd.DataFrame:
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    cal = calendar.set_index("date")
    out = records.copy()
    dates = out["transit_date"]
    inside = dates.isin(cal.index)
    out["is_holiday"] = dates.map(cal["is_national_holiday"].astype(bool)).eq(True)
    out["is_school_break"] = dates.map(cal["is_school_break"].astype(bool)).eq(True)
    diagnostics.add("calendar", "date outside calendar; flags set false", int((~inside).sum()),
                    dates[~inside].iloc[0].date() if (~inside).any() else None)
    return out


# --- headway ---------------------------------------------------------------

def compute_actual_headway(records: pd.DataFrame) -> pd.DataFrame:
    """Seconds since the previous vehicle served the same stop, route and direction that day."""
    out = records.copy()
    keys = ["route_id", "direction", "stop_id", "transit_date"]
    has = out["actual_arrival"].notna()
    sub = out.loc[has, keys + ["actual_arrival"]].sort_values(keys + ["actual_arrival"], kind="stable")
    diff = sub.groupby(keys, sort=False)["actual_arrival"].diff().dt.total_seconds()
    out["actual_headway"] = np.nan
    out.loc[diff.index, "actual_headway"] = diff
    return out


# --- aggregation -----------------------------------------------------------

TRIP_COLUMNS = [
    "transit_date", "trip_id", "route_id", "direction", "block_id", "time_window",
    "trip_start", "trip_end", "n_stops", "mean_temperature", "mean_humidity",
    "mean_precipitation", "mean_scheduled_headway", "mean_actual_headway", "mean_traffic_speed",
    "max_load", "target_bin", "is_holiday", "is_school_break", "zero_load_at_trip_end",
    "year", "month", "day", "hour", "day_of_week",
]

STOP_COLUMNS = [
    "transit_date", "route_id", "direction", "stop_id", "stop_sequence", "time_window",
    "summed_load", "target_bin", "n_vehicles", "trip_id", "block_id", "trip_start",
    "scheduled_arrival", "temperature", "humidity", "precipitation", "traffic_speed",
    "scheduled_headway", "actual_headway", "is_holiday", "is_school_break",
    "zero_load_at_trip_end", "year", "month", "day", "hour", "day_of_week",
]


def _ensure_context(records: pd.DataFrame) -> pd.DataFrame:
    out = records
    for c in ("temperature", "humidity", "precipitation", "traffic_speed", "actual_headway"):
        if c not in out:
            out = out.assign(**{c: np.nan})
    for c in ("is_holiday", "is_school_break"):
        if c not in out:
            out = out.assign(**{c: False})
    return out


def _calendar_parts(frame: pd.DataFrame, date_col: str, time_col: str) -> pd.DataFrame:
    frame["year"] = frame[date_col].dt.year.astype(np.int64)
    frame["month"] = frame[date_col].dt.month.astype(np.int64)
    frame["day"] = frame[date_col].dt.day.astype(np.int64)
    frame["hour"] = frame[time_col].dt.hour.astype(np.int64)
    frame["day_of_week"] = frame[date_col].dt.dayofweek.astype(np.int64)
    return frame


def aggregate_trips(records: pd.DataFrame, window_minutes: int) -> pd.DataFrame:
    """One row per (transit_date, trip_id): means for context, max for load, first for the rest."""
    df = _ensure_context(records)
    df = df.sort_values(["transit_date", "trip_id", "stop_sequence"], kind="stable")
    df = df.assign(load_f=df["load"].astype("Float64").astype(float))
    g = df.groupby(["transit_date", "trip_id"], sort=True)
    out = g.agg(
        route_id=("route_id", "first"),
        direction=("direction", "first"),
        block_id=("block_id", "first"),
        trip_start=("scheduled_arrival", "first"),
        trip_end=("scheduled_arrival", "last"),
        n_stops=("stop_id", "size"),
        mean_temperature=("temperature", "mean"),
        mean_humidity=("humidity", "mean"),
        mean_precipitation=("precipitation", "mean"),
        mean_scheduled_headway=("scheduled_headway", "mean"),
        mean_actual_headway=("actual_headway", "mean"),
        mean_traffic_speed=("traffic_speed", "mean"),
        max_load=("load_f", "max"),
        is_holiday=("is_holiday", "first"),
        is_school_break=("is_school_break", "first"),
        zero_load_at_trip_end=("zero_load_at_trip_end", "first"),
    ).reset_index()
    out["max_load"] = out["max_load"].astype(np.int64)
    out["time_window"] = time_windows(out["trip_start"], window_minutes)
    out["target_bin"] = bin_levels(out["max_load"].to_numpy(), Scheme.TRIP)
    out = _calendar_parts(out, "transit_date", "trip_start")
    return out[TRIP_COLUMNS]


def aggregate_trip(records: pd.DataFrame, window_minutes: int) -> Optional[pd.Series]:
    """Aggregate the records of a single trip; ``None`` for an empty group."""
    if records.empty:
        log.warning("aggregate_trip: empty group skipped")
        return None
    return aggregate_trips(records, window_minutes).iloc[0]


def aggregate_stops(records: pd.DataFrame, window_minutes: int) -> pd.DataFrame:
    """Group by (date, route, direction, stop, window); loads summed, context averaged."""
    df = _ensure_context(records)
    df = df.assign(time_window=time_windows(df["scheduled_arrival"], window_minutes),
                   load_f=df["load"].astype("Float64").astype(float))
    trip_start = df.groupby(["transit_date", "trip_id"], sort=False)["scheduled_arrival"].transform("min")
    df = df.assign(trip_start=trip_start)
    keys = ["transit_date", "route_id", "direction", "stop_id", "time_window"]
    df = df.sort_values(keys + ["scheduled_arrival"], kind="stable")
    g = df.groupby(keys, sort=True)
    out = g.agg(
        stop_sequence=("stop_sequence", "first"),
        summed_load=("load_f", "sum"),
        n_vehicles=("trip_id", "size"),
        trip_id=("trip_id", "first"),
        block_id=("block_id", "first"),
        trip_start=("trip_start", "first"),
        scheduled_arrival=("scheduled_arrival", "first"),
        temperature=("temperature", "mean"),
        humidity=("humidity", "mean"),
        precipitation=("precipitation", "mean"),
        traffic_speed=("traffic_speed", "mean"),
        scheduled_headway=("scheduled_headway", "mean"),
        actual_headway=("actual_headway", "mean"),
        is_holiday=("is_holiday", "first"),
        is_school_break=("is_school_break", "first"),
        zero_load_at_trip_end=("zero_load_at_trip_end", "first"),
    ).reset_index()
    out["summed_load"] = out["summed_load"].astype(np.int64)
    out["target_bin"] = bin_levels(out["summed_load"].to_numpy(), Scheme.STOP)
    out = _calendar_parts(out, "transit_date", "scheduled_arrival")
    return out[STOP_COLUMNS]


@dataclass
class FusedData:
    records: pd.DataFrame
    trips: pd.DataFrame
    stops: pd.DataFrame
    diagnostics: Diagnostics


def fuse(records: pd.DataFrame, gtfs: GtfsBundle, weather: pd.DataFrame, traffic: pd.DataFrame,
         segments: pd.DataFrame, calendar: pd.DataFrame, window_minutes: int,
         stop_window_minutes: Optional[int] = None) -> FusedData:
    """Run all joins on clean records, then both aggregations.

    ``stop_window_minutes`` (default: ``window_minutes``) sets the stop-level grouping.
    """
    diag = Diagnostics()
    rec = join_weather(records, weather, gtfs.stops, diag)
    rec = join_traffic(rec, gtfs, traffic, segments, diagnostics=diag)
    rec = join_calendar(rec, calendar, diag)
    rec = compute_actual_headway(rec)
    trips = aggregate_trips(rec, window_minutes)
    stops = aggregate_stops(rec, stop_window_minutes or window_minutes)
    log.info("fuse: %d records -> %d trips, %d stop rows", len(rec), len(trips), len(stops))
    return FusedData(rec, trips, stops, diag)


def _format(frame: pd.DataFrame, datetime_cols: Sequence[str]) -> pd.DataFrame:
    out = frame.copy()
    out["transit_date"] = out["transit_date"].dt.strftime("%Y-%m-%d")
    for c in datetime_cols:
        out[c] = out[c].dt.strftime("%Y-%m-%dT%H:%M:%S")
    for c in ("is_holiday", "is_school_break", "zero_load_at_trip_end"):
        out[c] = out[c].astype(int)
    return out


def trips_to_text(trips: pd.DataFrame) -> pd.DataFrame:
    return _format(trips, ["trip_start", "trip_end"])


def stops_to_text(stops: pd.DataFrame) -> pd.DataFrame:
    return _format(stops, ["trip_start", "scheduled_arrival"])


def _parse_fused(frame: pd.DataFrame, datetime_cols: Sequence[str]) -> pd.DataFrame:
    frame["transit_date"] = pd.to_datetime(frame["transit_date"], format="%Y-%m-%d")
    for c in datetime_cols:
        frame[c] = pd.to_datetime(frame[c], format="%Y-%m-%dT%H:%M:%S")
    for c in ("is_holiday", "is_school_break", "zero_load_at_trip_end"):
        frame[c] = frame[c].astype(bool)
    for c in ("trip_id", "route_id", "direction", "block_id", "stop_id"):
        if c in frame:
            frame[c] = frame[c].astype(str)
    return frame


def read_trips(path) -> pd.DataFrame:
    from tlf.io import read_csv

    frame = read_csv(path, dtype={"trip_id": str, "route_id": str, "direction": str, "block_id": str})
    return _parse_fused(frame, ["trip_start", "trip_end"])[TRIP_COLUMNS]


def read_stops(path) -> pd.DataFrame:
    from tlf.io import read_csv

    frame = read_csv(path, dtype={"trip_id": str, "route_id": str, "direction": str,
                                  "block_id": str, "stop_id": str})
    return _parse_fused(frame, ["trip_start", "scheduled_arrival"])[STOP_COLUMNS]
