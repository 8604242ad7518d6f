"""CSV/GTFS parsers producing validated raw frames plus per-row diagnostics.

Every data row either becomes a record or is counted as a fatal row with a
diagnostic; nothing is dropped silently.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd
import shapely.wkt

from tlf.domain import ApcRecord
from tlf.io import read_csv, write_csv

log = logging.getLogger(__name__)

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%S"
DATE_FORMAT = "%Y-%m-%d"


class IngestError(Exception):
    """File-level failure: missing file, missing column, broken references."""


APC_COLUMNS = (
    "transit_date",
    "trip_id",
    "block_id",
    "route_id",
    "direction",
    "vehicle_id",
    "stop_id",
    "stop_sequence",
    "scheduled_arrival",
    "actual_arrival",
    "ons",
    "offs",
    "load",
    "scheduled_headway",
    "zero_load_at_trip_end",
)


@dataclass
class ApcSchema:
    """Maps canonical APC field names to the column headers of an export."""

    columns: Dict[str, str] = field(default_factory=lambda: {c: c for c in APC_COLUMNS})

    @classmethod
    def from_mapping(cls, overrides: Optional[dict]) -> "ApcSchema":
        cols = {c: c for c in APC_COLUMNS}
        for key, value in (overrides or {}).items():
            if key not in cols:
                raise IngestError(f"unknown APC field in schema config: {key}")
            cols[key] = value
        return cls(cols)


@dataclass
class ParseResult:
    records: pd.DataFrame
    diagnostics: pd.DataFrame
    n_rows: int

    @property
    def n_fatal(self) -> int:
        if self.diagnostics.empty:
            return 0
        return int(self.diagnostics.loc[self.diagnostics["fatal"], "row"].nunique())


@dataclass
class _Col:
    name: str
    kind: str
    required: bool = True


def _empty_diagnostics() -> pd.DataFrame:
    return pd.DataFrame({"row": pd.Series(dtype=np.int64), "field": pd.Series(dtype=str),
                         "reason": pd.Series(dtype=str), "fatal": pd.Series(dtype=bool)})


_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


def _parse_column(values: pd.Series, kind: str):
    """Return (parsed series, mask of non-empty values that failed to parse)."""
    stripped = values.str.strip()
    empty = stripped == ""
    if kind == "str":
        return stripped.where(~empty, None), pd.Series(False, index=values.index)
    if kind in ("date", "datetime"):
        fmt = DATE_FORMAT if kind == "date" else "ISO8601"
        parsed = pd.to_datetime(stripped.where(~empty, None), format=fmt, errors="coerce")
        if kind == "date":
            parsed = parsed.dt.normalize()
        return parsed, parsed.isna() & ~empty
    if kind in ("int", "float"):
        parsed = pd.to_numeric(stripped.where(~empty, None), errors="coerce")
        bad = parsed.isna() & ~empty
        if kind == "int":
            frac = parsed.notna() & (parsed != np.floor(parsed))
            bad |= frac
            parsed = parsed.where(~frac).astype("Int64")
        return parsed, bad
    if kind == "bool":
        low = stripped.str.lower()
        parsed = pd.Series(pd.NA, index=values.index, dtype="boolean")
        parsed[low.isin(_TRUE)] = True
        parsed[low.isin(_FALSE)] = False
        return parsed, parsed.isna() & ~empty
    raise ValueError(kind)


def _parse_table(path, cols: Sequence[_Col], rename: Optional[dict] = None):
    path = Path(path)
    if not path.exists():
        raise IngestError(f"missing file: {path}")
    raw = read_csv(path, dtype=str, keep_default_na=False)
    if rename:
        raw = raw.rename(columns={v: k for k, v in rename.items()})
    missing = [c.name for c in cols if c.name not in raw.columns]
    if missing:
        shown = [rename.get(m, m) if rename else m for m in missing]
        raise IngestError(f"{path}: missing mandatory column(s) {shown}")
    rows = np.arange(1, len(raw) + 1)
    out = {"row": rows}
    diags = []
    fatal = np.zeros(len(raw), dtype=bool)
    for col in cols:
        parsed, bad = _parse_column(raw[col.name], col.kind)
        empty = (raw[col.name].str.strip() == "").to_numpy()
        bad = bad.to_numpy()
        if col.required:
            failed = bad | empty
            fatal |= failed
            reason = np.where(empty, "missing value", "unparseable value")
            if failed.any():
                diags.append(pd.DataFrame({"row": rows[failed], "field": col.name,
                                           "reason": reason[failed], "fatal": True}))
        elif bad.any():
            diags.append(pd.DataFrame({"row": rows[bad], "field": col.name,
                                       "reason": "unparseable value", "fatal": False}))
        out[col.name] = parsed.reset_index(drop=True)
    frame = pd.DataFrame(out)
    return frame, diags, fatal, len(raw)


def _finish(frame, diags, fatal, n_rows, extra_fatal=()) -> ParseResult:
    for mask, field_name, reason in extra_fatal:
        mask = np.asarray(mask) & ~fatal
        if mask.any():
            diags.append(pd.DataFrame({"row": frame["row"].to_numpy()[mask], "field": field_name,
                                       "reason": reason, "fatal": True}))
            fatal = fatal | mask
    diagnostics = pd.concat(diags, ignore_index=True) if diags else _empty_diagnostics()
    diagnostics = diagnostics.sort_values(["row", "field"], kind="stable").reset_index(drop=True)
    records = frame.loc[~fatal].reset_index(drop=True)
    return ParseResult(records, diagnostics, n_rows)


# --- APC -------------------------------------------------------------------

_APC_SPEC = [
    _Col("transit_date", "date"),
    _Col("trip_id", "str"),
    _Col("block_id", "str", required=False),
    _Col("route_id", "str"),
    _Col("direction", "str"),
    _Col("vehicle_id", "str", required=False),
    _Col("stop_id", "str"),
    _Col("stop_sequence", "int"),
    _Col("scheduled_arrival", "datetime"),
    _Col("actual_arrival", "datetime", required=False),
    _Col("ons", "int", required=False),
    _Col("offs", "int", required=False),
    _Col("load", "int", required=False),
    _Col("scheduled_headway", "float", required=False),
    _Col("zero_load_at_trip_end", "bool", required=False),
]


def parse_apc_file(path, schema: Optional[ApcSchema] = None) -> ParseResult:
    schema = schema or ApcSchema()
    frame, diags, fatal, n = _parse_table(path, _APC_SPEC, rename=schema.columns)
    for name in ("ons", "offs"):
        neg = (frame[name] < 0).fillna(False).to_numpy()
        if neg.any():
            diags.append(pd.DataFrame({"row": frame["row"].to_numpy()[neg], "field": name,
                                       "reason": "negative count", "fatal": False}))
    frame["zero_load_at_trip_end"] = frame["zero_load_at_trip_end"].fillna(False).astype(bool)
    frame["is_clean"] = False
    result = _finish(frame, diags, fatal, n)
    log.info("parsed %s: %d rows, %d records, %d fatal", path, n, len(result.records), result.n_fatal)
    return result


def _fmt_ts(series: pd.Series) -> pd.Series:
    return series.dt.strftime(TIMESTAMP_FORMAT).fillna("")


def apc_to_text(frame: pd.DataFrame, schema: Optional[ApcSchema] = None) -> pd.DataFrame:
    schema = schema or ApcSchema()
    out = pd.DataFrame({
        "transit_date": frame["transit_date"].dt.strftime(DATE_FORMAT),
        "trip_id": frame["trip_id"],
        "block_id": frame["block_id"],
        "route_id": frame["route_id"],
        "direction": frame["direction"],
        "vehicle_id": frame["vehicle_id"],
        "stop_id": frame["stop_id"],
        "stop_sequence": frame["stop_sequence"].astype("Int64"),
        "scheduled_arrival": _fmt_ts(frame["scheduled_arrival"]),
        "actual_arrival": _fmt_ts(frame["actual_arrival"]),
        "ons": frame["ons"].astype("Int64"),
        "offs": frame["offs"].astype("Int64"),
        "load": frame["load"].astype("Int64"),
        "scheduled_headway": frame["scheduled_headway"],
        "zero_load_at_trip_end": frame["zero_load_at_trip_end"].astype(int),
    })
    return out.rename(columns=schema.columns)


def write_apc_file(frame: pd.DataFrame, path, schema: Optional[ApcSchema] = None,
                   provenance: Optional[dict] = None) -> Path:
    return write_csv(apc_to_text(frame, schema), path, provenance)


def _opt(value, cast):
    if value is None or value is pd.NA or value is pd.NaT:
        return None
    if isinstance(value, float) and np.isnan(value):
        return None
    return cast(value)


def iter_records(frame: pd.DataFrame) -> Iterator[ApcRecord]:
    """Yield ApcRecord values from a parsed APC frame."""
    clean = frame["is_clean"] if "is_clean" in frame else pd.Series(False, index=frame.index)
    cols = [frame[c].tolist() for c in APC_COLUMNS] + [clean.tolist()]
    for (date, trip, block, route, direction, vehicle, stop, seq, sched, actual, ons, offs,
         load, headway, zero_end, is_clean) in zip(*cols):
        yield ApcRecord(
            transit_date=date.date(),
            trip_id=trip,
            block_id=block,
            route_id=route,
            direction=direction,
            vehicle_id=vehicle,
            stop_id=stop,
            stop_sequence=int(seq),
            scheduled_arrival=sched.to_pydatetime(),
            actual_arrival=_opt(actual, lambda v: v.to_pydatetime()),
            ons=_opt(ons, int),
            offs=_opt(offs, int),
            load=_opt(load, int),
            scheduled_headway=_opt(headway, float),
            zero_load_at_trip_end=bool(zero_end),
            is_clean=bool(is_clean),
        )


def records_to_frame(records: Sequence[ApcRecord]) -> pd.DataFrame:
    """Inverse of ``iter_records``; used for small fixtures and tests."""
    rows = [{c: getattr(r, c) for c in APC_COLUMNS} | {"is_clean": r.is_clean} for r in records]
    frame = pd.DataFrame(rows, columns=list(APC_COLUMNS) + ["is_clean"])
    frame["transit_date"] = pd.to_datetime(frame["transit_date"])
    frame["scheduled_arrival"] = pd.to_datetime(frame["scheduled_arrival"])
    frame["actual_arrival"] = pd.to_datetime(frame["actual_arrival"])
    for c in ("ons", "offs", "load", "stop_sequence"):
        frame[c] = frame[c].astype("Int64")
    frame["scheduled_headway"] = frame["scheduled_headway"].astype(float)
    frame["zero_load_at_trip_end"] = frame["zero_load_at_trip_end"].astype(bool)
    frame.insert(0, "row", np.arange(1, len(frame) + 1))
    return frame


# --- weather / traffic / calendar -----------------------------------------

_WEATHER_SPEC = [
    _Col("station_id", "str"),
    _Col("latitude", "float"),
    _Col("longitude", "float"),
    _Col("timestamp", "datetime"),
    _Col("temperature", "float", required=False),
    _Col("humidity", "float", required=False),
    _Col("precipitation_intensity", "float", required=False),
]


def parse_weather_file(path) -> ParseResult:
    frame, diags, fatal, n = _parse_table(path, _WEATHER_SPEC)
    ts = frame["timestamp"]
    off_hour = (ts.notna() & (ts != ts.dt.floor("h"))).to_numpy()
    hum = frame["humidity"]
    bad_hum = (hum.notna() & ((hum < 0) | (hum > 1))).to_numpy()
    bad_prec = (frame["precipitation_intensity"] < 0).fillna(False).to_numpy()
    return _finish(frame, diags, fatal, n, [
        (off_hour, "timestamp", "not aligned to a whole hour"),
        (bad_hum, "humidity", "humidity outside [0, 1]"),
        (bad_prec, "precipitation_intensity", "negative precipitation"),
    ])


def merge_weather_sources(frames: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """Stack several weather sources; first-listed source wins per (station, hour)."""
    stacked = pd.concat(list(frames), ignore_index=True)
    return stacked.drop_duplicates(["station_id", "timestamp"], keep="first").reset_index(drop=True)


_TRAFFIC_SPEC = [
    _Col("segment_id", "str"),
    _Col("timestamp", "datetime"),
    _Col("speed", "float"),
]

_SEGMENT_SPEC = [
    _Col("segment_id", "str"),
    _Col("geometry", "str"),
]


def parse_traffic_file(path) -> ParseResult:
    frame, diags, fatal, n = _parse_table(path, _TRAFFIC_SPEC)
    ts = frame["timestamp"]
    unaligned = (ts.notna() & (ts != ts.dt.floor("5min"))).to_numpy()
    negative = (frame["speed"] < 0).fillna(False).to_numpy()
    return _finish(frame, diags, fatal, n, [
        (unaligned, "timestamp", "not 5-minute aligned"),
        (negative, "speed", "negative speed"),
    ])


def parse_segments_file(path) -> pd.DataFrame:
    """Segment geometry as WKT LINESTRING in lon/lat order."""
    frame, diags, fatal, n = _parse_table(path, _SEGMENT_SPEC)
    if fatal.any():
        raise IngestError(f"{path}: {int(fatal.sum())} segment rows lack id or geometry")
    try:
        frame["geometry"] = [shapely.wkt.loads(g) for g in frame["geometry"]]
    except Exception as exc:  # shapely raises several error types
        raise IngestError(f"{path}: bad segment geometry ({exc})") from exc
    return frame.drop(columns="row")


_CALENDAR_SPEC = [
    _Col("date", "date"),
    _Col("is_school_break", "bool"),
    _Col("is_national_holiday", "bool"),
]


def parse_calendar_file(path) -> ParseResult:
    frame, diags, fatal, n = _parse_table(path, _CALENDAR_SPEC)
    dup = (frame["date"].duplicated(keep="first") & frame["date"].notna()).to_numpy()
    result = _finish(frame, diags, fatal, n, [(dup, "date", "duplicate date")])
    for c in ("is_school_break", "is_national_holiday"):
        result.records[c] = result.records[c].astype(bool)
    return result


# --- GTFS ------------------------------------------------------------------

@dataclass
class GtfsBundle:
    routes: pd.DataFrame
    trips: pd.DataFrame
    stop_times: pd.DataFrame
    stops: pd.DataFrame
    shapes: pd.DataFrame
    calendar: Optional[pd.DataFrame] = None


def gtfs_time_to_seconds(values: pd.Series) -> np.ndarray:
    parts = values.str.strip().str.split(":", expand=True).astype(int)
    return (parts[0] * 3600 + parts[1] * 60 + parts[2]).to_numpy()


def seconds_to_gtfs_time(seconds) -> List[str]:
    s = np.asarray(seconds, dtype=np.int64)
    return [f"{h:02d}:{m:02d}:{x:02d}" for h, m, x in zip(s // 3600, s // 60 % 60, s % 60)]


_DAYS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")


def _read_gtfs_table(directory: Path, name: str, required: Sequence[str], optional=False):
    path = directory / name
    if not path.exists():
        if optional:
            return None
        raise IngestError(f"missing GTFS file: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise IngestError(f"{path}: missing column(s) {missing}")
    return frame


def _check_refs(values: pd.Series, known: pd.Series, what: str, where: str):
    unknown = ~values.isin(set(known))
    if unknown.any():
        raise IngestError(f"{where} references unknown {what} {values[unknown].iloc[0]!r}")


def parse_gtfs(directory) -> GtfsBundle:
    d = Path(directory)
    if not d.is_dir():
        raise IngestError(f"missing GTFS directory: {d}")
    routes = _read_gtfs_table(d, "routes.txt", ["route_id"])
    trips = _read_gtfs_table(d, "trips.txt", ["route_id", "trip_id", "direction_id"])
    stop_times = _read_gtfs_table(d, "stop_times.txt",
                                  ["trip_id", "arrival_time", "stop_id", "stop_sequence"])
    stops = _read_gtfs_table(d, "stops.txt", ["stop_id", "stop_lat", "stop_lon"])
    shapes = _read_gtfs_table(d, "shapes.txt",
                              ["shape_id", "shape_pt_lat", "shape_pt_lon", "shape_pt_sequence"])
    calendar = _read_gtfs_table(d, "calendar.txt", ["service_id", *_DAYS], optional=True)

    _check_refs(trips["route_id"], routes["route_id"], "route_id", "trips.txt")
    _check_refs(stop_times["trip_id"], trips["trip_id"], "trip_id", "stop_times.txt")
    _check_refs(stop_times["stop_id"], stops["stop_id"], "stop_id", "stop_times.txt")
    if "shape_id" in trips:
        _check_refs(trips["shape_id"], shapes["shape_id"], "shape_id", "trips.txt")
    if calendar is not None and "service_id" in trips:
        _check_refs(trips["service_id"], calendar["service_id"], "service_id", "trips.txt")

    trips = trips.copy()
    if "direction_name" in trips:
        trips["direction"] = trips["direction_name"]
    else:
        trips["direction"] = trips["direction_id"]
    if "block_id" not in trips:
        trips["block_id"] = ""

    stop_times = stop_times.copy()
    stop_times["stop_sequence"] = stop_times["stop_sequence"].astype(int)
    stop_times["arrival_s"] = gtfs_time_to_seconds(stop_times["arrival_time"])
    stop_times = stop_times.sort_values(["trip_id", "stop_sequence"], kind="stable")
    repeated = stop_times.duplicated(["trip_id", "stop_sequence"])
    if repeated.any():
        bad = stop_times.loc[repeated, "trip_id"].iloc[0]
        raise IngestError(f"stop_times.txt: stop_sequence not strictly increasing for trip {bad!r}")
    stop_times = stop_times.reset_index(drop=True)

    stops = stops.copy()
    stops["stop_lat"] = stops["stop_lat"].astype(float)
    stops["stop_lon"] = stops["stop_lon"].astype(float)
    shapes = shapes.copy()
    shapes["shape_pt_lat"] = shapes["shape_pt_lat"].astype(float)
    shapes["shape_pt_lon"] = shapes["shape_pt_lon"].astype(float)
    shapes["shape_pt_sequence"] = shapes["shape_pt_sequence"].astype(int)
    shapes = shapes.sort_values(["shape_id", "shape_pt_sequence"], kind="stable").reset_index(drop=True)
    return GtfsBundle(routes, trips, stop_times, stops, shapes, calendar)


def write_gtfs(bundle: GtfsBundle, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    st = bundle.stop_times.copy()
    if "arrival_time" not in st:
        st["arrival_time"] = seconds_to_gtfs_time(st["arrival_s"])
        st["departure_time"] = st["arrival_time"]
    st = st.drop(columns=[c for c in ("arrival_s",) if c in st])
    trips = bundle.trips.drop(columns=[c for c in ("direction",) if c in bundle.trips])
    tables = {"routes.txt": bundle.routes, "trips.txt": trips, "stop_times.txt": st,
              "stops.txt": bundle.stops, "shapes.txt": bundle.shapes}
    if bundle.calendar is not None:
        tables["calendar.txt"] = bundle.calendar
    for name, frame in tables.items():
        frame.to_csv(d / name, index=False, lineterminator="\n")
    return d


def service_ids_for(calendar: Optional[pd.DataFrame], day: dt.date) -> List[str]:
    if calendar is None:
        return []
    col = _DAYS[day.weekday()]
    return calendar.loc[calendar[col].astype(int) == 1, "service_id"].tolist()
