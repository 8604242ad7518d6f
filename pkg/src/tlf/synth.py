"""Seeded synthetic city: schedules, demand, weather, traffic, calendar and APC noise.

The generator is the oracle substrate for the rest of the package. Ground
truth occupancy comes from a multiplicative Poisson demand model, and the
noise injector corrupts whole trips so that each corrupted trip trips
exactly one validity rule, recorded in a corruption log.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pandas.tseries.holiday import USFederalHolidayCalendar

from tlf.domain import ConfigError
from tlf.geo import MILE_M, LocalProjection
from tlf.ingest import GtfsBundle, seconds_to_gtfs_time, write_apc_file, write_gtfs
from tlf.io import write_csv

CENTER = (36.1627, -86.7816)

SERVICES = ("WKD", "SAT", "SUN")

DEFAULT_HOUR_CURVE = [
    0.3, 0.2, 0.2, 0.2, 0.5, 0.9, 1.4, 1.9, 1.8, 1.2, 1.0, 1.0,
    1.1, 1.0, 1.0, 1.3, 1.8, 2.0, 1.5, 1.1, 0.9, 0.7, 0.5, 0.4,
]
DEFAULT_MONTH_CURVE = [0.85, 0.9, 1.0, 1.05, 1.05, 0.9, 0.85, 0.95, 1.1, 1.15, 1.0, 0.8]
DEFAULT_DOW_CURVE = [1.0, 1.0, 1.0, 1.0, 1.05, 0.7, 0.5]

# (start month, start day, end month, end day), inclusive
DEFAULT_SCHOOL_BREAKS = [
    (1, 1, 1, 4), (3, 14, 3, 18), (6, 1, 8, 8), (10, 11, 10, 15), (11, 22, 11, 26), (12, 20, 12, 31),
]

RULES = ("R1", "R2", "R3", "R4", "R5", "R6")


@dataclass
class NoiseConfig:
    count_noise_sd: float = 1.0
    p_large_negative_load: float = 0.01  # R1
    p_count_imbalance: float = 0.01  # R2
    p_null_arrivals: float = 0.01  # R3
    p_null_offs: float = 0.01  # R4
    p_duplicate_trip: float = 0.01  # R5
    p_shuffle_sequence: float = 0.01  # R6

    def rule_probabilities(self) -> np.ndarray:
        return np.array([self.p_large_negative_load, self.p_count_imbalance, self.p_null_arrivals,
                         self.p_null_offs, self.p_duplicate_trip, self.p_shuffle_sequence])

    def validate(self):
        p = self.rule_probabilities()
        if (p < 0).any() or (p > 1).any():
            raise ConfigError("noise probabilities must lie in [0, 1]")
        if p.sum() > 1:
            raise ConfigError("noise probabilities must sum to at most 1")
        if self.count_noise_sd < 0:
            raise ConfigError("count_noise_sd must be non-negative")


@dataclass
class SynthConfig:
    seed: int = 7
    start_date: str = "2021-10-01"
    n_days: int = 60
    n_routes: int = 30
    n_directions_per_route: int = 2
    stops_min: int = 10
    stops_max: int = 40
    service_start: str = "04:00"
    service_end: str = "25:30"
    headway_choices: List[int] = field(default_factory=lambda: [90, 120, 180])
    base_rate_min: float = 0.2
    base_rate_max: float = 5.0
    hour_curve: List[float] = field(default_factory=lambda: list(DEFAULT_HOUR_CURVE))
    month_curve: List[float] = field(default_factory=lambda: list(DEFAULT_MONTH_CURVE))
    dow_curve: List[float] = field(default_factory=lambda: list(DEFAULT_DOW_CURVE))
    holiday_multiplier: float = 0.55
    school_break_multiplier: float = 0.85
    rain_dampening: float = 0.3
    daily_factor_sd: float = 0.15
    daily_factor_ar: float = 0.7
    alight_prob: float = 0.15
    p_carry_through: float = 0.2
    n_stations: int = 6
    n_segments: int = 60
    p_missing_weather: float = 0.01
    p_missing_traffic: float = 0.02
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def validate(self):
        if self.n_directions_per_route != 2:
            raise ConfigError("blocks alternate direction: n_directions_per_route must be 2")
        if self.n_routes < 1 or self.n_days < 1:
            raise ConfigError("n_routes and n_days must be positive")
        if not 2 <= self.stops_min <= self.stops_max:
            raise ConfigError("need 2 <= stops_min <= stops_max")
        if len(self.hour_curve) != 24 or len(self.month_curve) != 12 or len(self.dow_curve) != 7:
            raise ConfigError("hour/month/dow curves need 24/12/7 entries")
        rates = [self.base_rate_min, self.base_rate_max, self.holiday_multiplier,
                 self.school_break_multiplier, self.rain_dampening, *self.hour_curve,
                 *self.month_curve, *self.dow_curve]
        if min(rates) < 0 or self.base_rate_min > self.base_rate_max:
            raise ConfigError("rates and multipliers must be non-negative")
        if not 0 <= self.alight_prob <= 1 or not 0 <= self.p_carry_through <= 1:
            raise ConfigError("alight_prob and p_carry_through must lie in [0, 1]")
        if not self.headway_choices or min(self.headway_choices) <= 0:
            raise ConfigError("headway_choices must be positive minutes")
        span = _minutes(self.service_end) - _minutes(self.service_start)
        # longest possible trip: every segment at the maximum run time
        if span * 60 < (self.stops_max - 1) * 150:
            raise ConfigError("service span is shorter than one trip")
        self.noise.validate()


def _minutes(hhmm: str) -> int:
    h, m = hhmm.split(":")
    return int(h) * 60 + int(m)


@dataclass
class City:
    config: SynthConfig
    gtfs: GtfsBundle
    calendar: pd.DataFrame
    weather: pd.DataFrame
    traffic: pd.DataFrame
    segments: pd.DataFrame
    dates: List[dt.date]
    route_ids: List[str]
    base_rates: np.ndarray
    daily_factor: np.ndarray  # [route, day]
    precip: np.ndarray  # [station, hour since first date]
    templates: Dict[str, pd.DataFrame]

    def service_for(self, date: dt.date) -> str:
        row = self._calendar_row(date)
        if row is not None and row[1]:
            return "SUN"
        return (("WKD",) * 5 + ("SAT", "SUN"))[date.weekday()]

    def _calendar_row(self, date: dt.date):
        idx = (date - self.dates[0]).days
        if 0 <= idx < len(self.calendar):
            r = self.calendar.iloc[idx]
            return bool(r["is_school_break"]), bool(r["is_national_holiday"])
        return None


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


# --- city generation -------------------------------------------------------

def _direction_names(dx: float, dy: float) -> Tuple[str, str]:
    if abs(dy) >= abs(dx):
        return ("NORTH", "SOUTH") if dy > 0 else ("SOUTH", "NORTH")
    return ("EAST", "WEST") if dx > 0 else ("WEST", "EAST")


def _build_network(cfg: SynthConfig, rng: np.random.Generator, proj: LocalProjection):
    routes, trips, stop_times, stops, shapes = [], [], [], [], []
    route_info = []
    start_min, end_min = _minutes(cfg.service_start), _minutes(cfg.service_end)
    service_shift = {"WKD": (0, 0), "SAT": (15, 0), "SUN": (25, 30)}
    for r in range(cfg.n_routes):
        route_id = str(r + 1)
        n = int(rng.integers(cfg.stops_min, cfg.stops_max + 1))
        radius = rng.uniform(0, 6) * MILE_M
        angle = rng.uniform(0, 2 * np.pi)
        heading = rng.uniform(0, 2 * np.pi)
        spacing = rng.uniform(0.25, 0.45) * MILE_M
        turns = np.cumsum(rng.normal(0, 0.15, n))
        x = radius * np.cos(angle) + np.concatenate([[0], np.cumsum(spacing * np.cos(heading + turns[1:]))])
        y = radius * np.sin(angle) + np.concatenate([[0], np.cumsum(spacing * np.sin(heading + turns[1:]))])
        run = rng.integers(90, 151, n - 1)
        headway = int(rng.choice(cfg.headway_choices))
        zero_end = bool(rng.random() >= cfg.p_carry_through)
        names = _direction_names(x[-1] - x[0], y[-1] - y[0])
        routes.append({"route_id": route_id, "route_short_name": route_id, "route_type": 3})
        route_info.append({"route_id": route_id, "n": n, "headway": headway, "zero_end": zero_end})
        for d in (0, 1):
            xs = x if d == 0 else x[::-1] + 15.0
            ys = y if d == 0 else y[::-1] + 15.0
            lat, lon = proj.to_latlon(xs, ys)
            stop_ids = [f"S{r + 1:02d}{d}{k + 1:02d}" for k in range(n)]
            shape_id = f"SH{route_id}_{d}"
            for k in range(n):
                stops.append({"stop_id": stop_ids[k], "stop_name": f"Route {route_id} stop {k + 1}",
                              "stop_lat": round(float(lat[k]), 7), "stop_lon": round(float(lon[k]), 7)})
                shapes.append({"shape_id": shape_id, "shape_pt_lat": round(float(lat[k]), 7),
                               "shape_pt_lon": round(float(lon[k]), 7), "shape_pt_sequence": k + 1})
            route_info[-1][f"stops{d}"] = stop_ids
            route_info[-1][f"run{d}"] = run if d == 0 else run[::-1]
            route_info[-1][f"name{d}"] = names[d]
        duration = int(run.sum())
        for service in SERVICES:
            shift, extra = service_shift[service]
            h = (headway + extra) * 60
            first = (start_min + shift) * 60
            cycle_min = 2 * (duration + 300)
            n_blocks = max(1, math.ceil(cycle_min / h))
            half = n_blocks * h // 2
            for b in range(n_blocks):
                block_id = f"{route_id}_{service}_B{b + 1:02d}"
                t = first + b * h
                d = 0
                k = 0
                while t + duration <= end_min * 60:
                    trip_id = f"{route_id}_{service}_{b + 1:02d}_{k + 1:02d}"
                    trips.append({"route_id": route_id, "service_id": service, "trip_id": trip_id,
                                  "direction_id": d, "direction_name": route_info[-1][f"name{d}"],
                                  "block_id": block_id, "shape_id": f"SH{route_id}_{d}"})
                    arr = t + np.concatenate([[0], np.cumsum(route_info[-1][f"run{d}"])])
                    for s, (sid, a) in enumerate(zip(route_info[-1][f"stops{d}"], arr)):
                        stop_times.append((trip_id, int(a), sid, s + 1))
                    t += half
                    d ^= 1
                    k += 1
    st = pd.DataFrame(stop_times, columns=["trip_id", "arrival_s", "stop_id", "stop_sequence"])
    st["arrival_time"] = seconds_to_gtfs_time(st["arrival_s"])
    st["departure_time"] = st["arrival_time"]
    calendar = pd.DataFrame({
        "service_id": list(SERVICES),
        "monday": [1, 0, 0], "tuesday": [1, 0, 0], "wednesday": [1, 0, 0], "thursday": [1, 0, 0],
        "friday": [1, 0, 0], "saturday": [0, 1, 0], "sunday": [0, 0, 1],
        "start_date": cfg.start_date.replace("-", ""), "end_date": "20991231",
    })
    trips_df = pd.DataFrame(trips)
    trips_df["direction"] = trips_df["direction_name"]
    bundle = GtfsBundle(pd.DataFrame(routes), trips_df, st, pd.DataFrame(stops), pd.DataFrame(shapes),
                        calendar)
    return bundle, route_info


def _build_calendar(dates: List[dt.date]) -> pd.DataFrame:
    idx = pd.to_datetime(dates)
    holidays = set(USFederalHolidayCalendar().holidays(idx.min(), idx.max()).date)
    school = []
    for d in dates:
        on_break = any(dt.date(d.year, m1, d1) <= d <= dt.date(d.year, m2, d2)
                       for m1, d1, m2, d2 in DEFAULT_SCHOOL_BREAKS)
        school.append(on_break)
    return pd.DataFrame({"date": idx, "is_school_break": school,
                         "is_national_holiday": [d in holidays for d in dates]})


def _build_weather(cfg, rng, proj, dates):
    n_hours = (len(dates) + 1) * 24
    pts = rng.uniform(-7, 7, size=(cfg.n_stations, 2)) * MILE_M
    lat, lon = proj.to_latlon(pts[:, 0], pts[:, 1])
    t0 = pd.Timestamp(dates[0])
    stamps = t0 + pd.to_timedelta(np.arange(n_hours), unit="h")
    doy = stamps.dayofyear.to_numpy()
    hod = stamps.hour.to_numpy()
    # city-wide rain state (two-state Markov chain), locally modulated per station
    raining = np.zeros(n_hours, dtype=bool)
    u = rng.random(n_hours)
    for i in range(1, n_hours):
        raining[i] = u[i] < (0.75 if raining[i - 1] else 0.03)
    intensity = rng.gamma(1.5, 1.5, n_hours) * raining
    precip = np.zeros((cfg.n_stations, n_hours))
    rows = []
    for s in range(cfg.n_stations):
        local = np.clip(intensity * rng.uniform(0.6, 1.4, n_hours), 0, None)
        precip[s] = np.round(local, 3)
        temp = (15 + 10 * np.sin(2 * np.pi * (doy - 105) / 365) + 5 * np.sin(2 * np.pi * (hod - 9) / 24)
                + rng.normal(0, 1.0) + rng.normal(0, 0.8, n_hours) - 2.0 * (local > 0))
        hum = np.clip(0.6 - 0.01 * (temp - 15) + 0.25 * (local > 0) + rng.normal(0, 0.05, n_hours), 0, 1)
        rows.append(pd.DataFrame({
            "station_id": f"W{s + 1:02d}", "latitude": round(float(lat[s]), 6),
            "longitude": round(float(lon[s]), 6), "timestamp": stamps,
            "temperature": np.round(temp, 2), "humidity": np.round(hum, 3),
            "precipitation_intensity": precip[s], "source": "synth-a",
        }))
    weather = pd.concat(rows, ignore_index=True)
    keep = rng.random(len(weather)) >= cfg.p_missing_weather
    return weather.loc[keep].reset_index(drop=True), precip, np.column_stack([lat, lon])


def _build_traffic(cfg, rng, proj, dates, bundle):
    shapes = bundle.shapes
    segs = []
    shape_ids = shapes["shape_id"].unique()
    for i in range(cfg.n_segments):
        if i % 2 == 0:
            # follow a random route shape so most routes cross monitored cells
            sid = shape_ids[rng.integers(len(shape_ids))]
            pts = shapes.loc[shapes["shape_id"] == sid, ["shape_pt_lat", "shape_pt_lon"]].to_numpy()
            k = int(rng.integers(0, max(1, len(pts) - 3)))
            lat, lon = pts[k:k + 3, 0] + 0.0005, pts[k:k + 3, 1] + 0.0005
        else:
            x0, y0 = rng.uniform(-8, 8, 2) * MILE_M
            ang = rng.uniform(0, 2 * np.pi)
            steps = np.arange(3) * rng.uniform(0.3, 0.8) * MILE_M
            lat, lon = proj.to_latlon(x0 + steps * np.cos(ang), y0 + steps * np.sin(ang))
        wkt = "LINESTRING (" + ", ".join(f"{b:.6f} {a:.6f}" for a, b in zip(lat, lon)) + ")"
        segs.append({"segment_id": f"G{i + 1:03d}", "geometry": wkt})
    segments = pd.DataFrame(segs)
    n_slots = len(dates) * 288 + 24 * 12
    stamps = pd.Timestamp(dates[0]) + pd.to_timedelta(np.arange(n_slots) * 5, unit="min")
    minute = np.asarray(stamps.hour * 60 + stamps.minute)
    weekend = np.asarray(stamps.dayofweek >= 5)
    rush = np.exp(-((minute - 480) / 60.0) ** 2) + np.exp(-((minute - 1050) / 75.0) ** 2)
    rush = np.where(weekend, 0.3 * rush, rush)
    rows = []
    for i, seg in enumerate(segs):
        free = rng.uniform(30, 60)
        speed = np.clip(free * (1 - 0.35 * rush) + rng.normal(0, 2.0, n_slots), 3, None)
        rows.append(pd.DataFrame({"segment_id": seg["segment_id"], "timestamp": stamps,
                                  "speed": np.round(speed, 2)}))
    traffic = pd.concat(rows, ignore_index=True)
    keep = rng.random(len(traffic)) >= cfg.p_missing_traffic
    return traffic.loc[keep].reset_index(drop=True), segments


def _nearest_station(stop_lat, stop_lon, stations) -> np.ndarray:
    from tlf.geo import haversine_m

    dist = haversine_m(stop_lat[:, None], stop_lon[:, None], stations[None, :, 0], stations[None, :, 1])
    return np.argmin(dist, axis=1)


def _build_templates(bundle: GtfsBundle, route_info, station_of_stop: Dict[str, int]):
    info = {ri["route_id"]: ri for ri in route_info}
    route_idx = {ri["route_id"]: i for i, ri in enumerate(route_info)}
    st = bundle.stop_times.merge(
        bundle.trips[["trip_id", "route_id", "service_id", "direction", "block_id"]], on="trip_id")
    templates = {}
    for service in SERVICES:
        t = st[st["service_id"] == service].copy()
        t["dep"] = t.groupby("trip_id")["arrival_s"].transform("min")
        t = t.sort_values(["route_id", "block_id", "dep", "stop_sequence"],
                          key=lambda c: c.map(route_idx) if c.name == "route_id" else c,
                          kind="stable").reset_index(drop=True)
        t["route_idx"] = t["route_id"].map(route_idx).astype(np.int64)
        t["pos"] = t["stop_sequence"].to_numpy() - 1
        t["n_stops"] = t["route_id"].map({k: v["n"] for k, v in info.items()}).astype(np.int64)
        t["is_last"] = t["pos"] == t["n_stops"] - 1
        t["headway_s"] = t["route_id"].map({k: v["headway"] for k, v in info.items()}) * 60.0
        t.loc[t["service_id"] == "SUN", "headway_s"] += 1800.0
        t["zero_load_at_trip_end"] = t["route_id"].map({k: v["zero_end"] for k, v in info.items()})
        t["vehicle_id"] = "V" + t["block_id"].str.replace("_", "", regex=False)
        t["station_idx"] = t["stop_id"].map(station_of_stop).astype(np.int64)
        t["trip_idx"] = pd.factorize(t["trip_id"])[0]
        templates[service] = t[["trip_id", "block_id", "route_id", "direction", "vehicle_id",
                                "stop_id", "stop_sequence", "arrival_s", "pos", "is_last",
                                "headway_s", "zero_load_at_trip_end", "route_idx",
                                "station_idx", "trip_idx"]]
    return templates


def generate_city(config: SynthConfig) -> City:
    """Build the static city and its context streams; deterministic in ``config.seed``."""
    config.validate()
    proj = LocalProjection(*CENTER)
    start = dt.date.fromisoformat(config.start_date)
    dates = [start + dt.timedelta(days=i) for i in range(config.n_days)]
    bundle, route_info = _build_network(config, _rng(config.seed, 1), proj)
    weather, precip, stations = _build_weather(config, _rng(config.seed, 2), proj, dates)
    traffic, segments = _build_traffic(config, _rng(config.seed, 3), proj, dates, bundle)
    calendar = _build_calendar(dates)
    rng = _rng(config.seed, 4)
    lo, hi = np.log(max(config.base_rate_min, 1e-9)), np.log(max(config.base_rate_max, 1e-9))
    base = np.exp(rng.uniform(lo, hi, config.n_routes))
    if config.base_rate_min == config.base_rate_max:
        base = np.full(config.n_routes, config.base_rate_min)
    g = np.zeros((config.n_routes, config.n_days))
    eps = rng.normal(0, config.daily_factor_sd, (config.n_routes, config.n_days))
    g[:, 0] = eps[:, 0]
    for d in range(1, config.n_days):
        g[:, d] = config.daily_factor_ar * g[:, d - 1] + eps[:, d]
    stops = bundle.stops
    nearest = _nearest_station(stops["stop_lat"].to_numpy(), stops["stop_lon"].to_numpy(), stations)
    station_of_stop = dict(zip(stops["stop_id"], nearest))
    templates = _build_templates(bundle, route_info, station_of_stop)
    return City(config, bundle, calendar, weather, traffic, segments, dates,
                [ri["route_id"] for ri in route_info], base, np.exp(g), precip, templates)


# --- simulation ------------------------------------------------------------

APC_OUT = ["transit_date", "trip_id", "block_id", "route_id", "direction", "vehicle_id", "stop_id",
           "stop_sequence", "scheduled_arrival", "actual_arrival", "ons", "offs", "load",
           "scheduled_headway", "zero_load_at_trip_end"]


def simulate_service_day(city: City, date: dt.date, rng: np.random.Generator) -> pd.DataFrame:
    """Ground-truth stop events for one service day (loads are exact)."""
    cfg = city.config
    day_idx = (date - city.dates[0]).days
    if not 0 <= day_idx < len(city.dates):
        raise ConfigError(f"{date} is outside the simulated calendar")
    school, holiday = city._calendar_row(date)
    t = city.templates[city.service_for(date)]
    arrival = t["arrival_s"].to_numpy()
    hod = (arrival // 3600) % 24
    hour_abs = np.minimum(day_idx * 24 + arrival // 3600, city.precip.shape[1] - 1)
    ridx = t["route_idx"].to_numpy()
    rate = (city.base_rates[ridx]
            * np.asarray(cfg.hour_curve)[hod]
            * cfg.month_curve[date.month - 1]
            * cfg.dow_curve[date.weekday()]
            * (cfg.holiday_multiplier if holiday else 1.0)
            * (cfg.school_break_multiplier if school else 1.0)
            * city.daily_factor[ridx, day_idx]
            / (1.0 + cfg.rain_dampening * city.precip[t["station_idx"].to_numpy(), hour_abs]))
    is_last = t["is_last"].to_numpy()
    rate[is_last] = 0.0
    ons = rng.poisson(rate)
    offs = np.zeros_like(ons)
    load = np.zeros_like(ons)
    pos = t["pos"].to_numpy()
    zero_end = t["zero_load_at_trip_end"].to_numpy()
    for p in range(int(pos.max()) + 1):
        idx = np.flatnonzero(pos == p)
        if p == 0:
            load[idx] = ons[idx]
            continue
        prev = load[idx - 1]
        o = rng.binomial(prev, cfg.alight_prob)
        full = is_last[idx] & zero_end[idx]
        o[full] = prev[full]
        offs[idx] = o
        load[idx] = prev - o + ons[idx]
    # strictly increasing actual arrivals: per-trip delay random walk, steps > -60 s
    step = np.clip(np.round(rng.normal(0, 20, len(t))), -59, None)
    step[pos == 0] = np.round(rng.normal(0, 60, int((pos == 0).sum())))
    trip_idx = t["trip_idx"].to_numpy()
    cum = np.cumsum(step)
    start_cum = cum[pos == 0] - step[pos == 0]
    delay = cum - start_cum[trip_idx]
    base = np.datetime64(date, "s")
    out = pd.DataFrame({
        "transit_date": pd.Timestamp(date),
        "trip_id": t["trip_id"].to_numpy(),
        "block_id": t["block_id"].to_numpy(),
        "route_id": t["route_id"].to_numpy(),
        "direction": t["direction"].to_numpy(),
        "vehicle_id": t["vehicle_id"].to_numpy(),
        "stop_id": t["stop_id"].to_numpy(),
        "stop_sequence": t["stop_sequence"].to_numpy().astype(np.int64),
        "scheduled_arrival": base + arrival.astype("timedelta64[s]"),
        "actual_arrival": base + (arrival + delay.astype(np.int64)).astype("timedelta64[s]"),
        "ons": ons.astype(np.int64),
        "offs": offs.astype(np.int64),
        "load": load.astype(np.int64),
        "scheduled_headway": t["headway_s"].to_numpy(),
        "zero_load_at_trip_end": zero_end.astype(bool),
    })
    out["scheduled_arrival"] = out["scheduled_arrival"].astype("datetime64[ns]")
    out["actual_arrival"] = out["actual_arrival"].astype("datetime64[ns]")
    for c in ("ons", "offs", "load"):
        out[c] = out[c].astype("Int64")
    return out


def _trip_bounds(records: pd.DataFrame):
    key = records["transit_date"].astype("int64").to_numpy().astype(str).astype(object) + "|" + \
        records["trip_id"].to_numpy().astype(object)
    codes, _ = pd.factorize(key)
    starts = np.flatnonzero(np.r_[True, codes[1:] != codes[:-1]])
    ends = np.r_[starts[1:], len(codes)]
    return starts, ends


def inject_noise(records: pd.DataFrame, noise: NoiseConfig, rng: np.random.Generator):
    """Return (noisy records, corruption log).

    ``records`` must be clean ground truth grouped by trip in stop order, as
    produced by ``simulate_service_day``. Count noise is rule-preserving: a
    positive perturbation ``e`` at stop k adds phantom boardings at k and
    matching alightings at k+1 (a negative one does the reverse), so only the
    recorded load at stop k moves, by ``e`` but never below -5, and the trip
    balance is unchanged. Each corrupted trip receives exactly one
    corruption and is logged under the rule it violates.
    """
    noise.validate()
    out = records.copy().reset_index(drop=True)
    log_cols = ["transit_date", "trip_id", "rule"]
    if out.empty:
        return out, pd.DataFrame(columns=log_cols)
    starts, ends = _trip_bounds(out)
    ons = out["ons"].to_numpy(dtype=np.int64).copy()
    offs = out["offs"].to_numpy(dtype=np.int64).copy()
    load = out["load"].to_numpy(dtype=np.int64).copy()
    n = len(out)
    last = np.zeros(n, dtype=bool)
    last[ends - 1] = True
    if noise.count_noise_sd > 0:
        e = np.round(rng.normal(0.0, noise.count_noise_sd, n)).astype(np.int64)
        e = np.maximum(e, -5 - load)
        e[last] = 0
        up, down = np.maximum(e, 0), np.maximum(-e, 0)
        ons += up
        offs += down
        offs[1:] += up[:-1]
        ons[1:] += down[:-1]
        load += e
    actual = out["actual_arrival"].to_numpy().copy()
    offs_null = np.zeros(n, dtype=bool)

    probs = noise.rule_probabilities()
    n_trips = len(starts)
    u = rng.random(n_trips)
    kind = np.searchsorted(np.cumsum(probs), u, side="right")  # 6 == untouched
    log = []
    duplicates = []
    dates = out["transit_date"].to_numpy()
    trip_ids = out["trip_id"].to_numpy()
    for t in np.flatnonzero(kind < 6):
        s, e_ = starts[t], ends[t]
        rule = RULES[kind[t]]
        if rule == "R1":
            k = s + rng.integers(0, e_ - s - 1)
            load[k] = -int(rng.integers(6, 41))
        elif rule == "R2":
            total = max(ons[s:e_].sum(), offs[s:e_].sum(), 1)
            k = s + rng.integers(0, e_ - s)
            ons[k] += total // 2 + 2
        elif rule == "R3":
            actual[s:e_] = np.datetime64("NaT")
        elif rule == "R4":
            offs_null[s:e_] = True
        elif rule == "R5":
            duplicates.append((s, e_))
        elif rule == "R6":
            k = s + rng.integers(0, e_ - s - 1)
            actual[k], actual[k + 1] = actual[k + 1], actual[k]
        log.append((dates[s], trip_ids[s], rule))
    out["ons"] = pd.array(ons, dtype="Int64")
    offs_arr = pd.array(offs, dtype="Int64")
    offs_arr[offs_null] = pd.NA
    out["offs"] = offs_arr
    out["load"] = pd.array(load, dtype="Int64")
    out["actual_arrival"] = actual
    if duplicates:
        copies = [out.iloc[s:e_] for s, e_ in duplicates]
        out = pd.concat([out, *copies], ignore_index=True)
    return out, pd.DataFrame(log, columns=log_cols)


@dataclass
class Corpus:
    noisy: pd.DataFrame
    log: pd.DataFrame
    truth: pd.DataFrame


def simulate_day_with_noise(city: City, date: dt.date):
    seed = city.config.seed
    truth = simulate_service_day(city, date, _rng(seed, 10, date.toordinal()))
    noisy, log = inject_noise(truth, city.config.noise, _rng(seed, 11, date.toordinal()))
    return truth, noisy, log


def generate_corpus(city: City, threads: int = 1, dates: Optional[List[dt.date]] = None) -> Corpus:
    """Simulate every date; per-date RNG streams keep output independent of ``threads``."""
    dates = list(city.dates if dates is None else dates)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda d: simulate_day_with_noise(city, d), dates))
    else:
        parts = [simulate_day_with_noise(city, d) for d in dates]
    truth = pd.concat([p[0] for p in parts], ignore_index=True)
    noisy = pd.concat([p[1] for p in parts], ignore_index=True)
    log = pd.concat([p[2] for p in parts], ignore_index=True)
    return Corpus(noisy, log, truth)


def with_base_rates(city: City, base_rates) -> City:
    return dataclasses.replace(city, base_rates=np.asarray(base_rates, dtype=float))


# --- writers ---------------------------------------------------------------

def _fmt_ts(series):
    return series.dt.strftime("%Y-%m-%dT%H:%M:%S")


def write_city(city: City, out_dir, provenance: Optional[dict] = None) -> Dict[str, Path]:
    out = Path(out_dir)
    paths = {"gtfs": write_gtfs(city.gtfs, out / "gtfs")}
    if provenance is not None:
        from tlf.io import write_json

        write_json({}, out / "gtfs" / "provenance.json", provenance)
    w = city.weather.copy()
    w["timestamp"] = _fmt_ts(w["timestamp"])
    paths["weather"] = write_csv(w, out / "weather.csv", provenance)
    tr = city.traffic.copy()
    tr["timestamp"] = _fmt_ts(tr["timestamp"])
    paths["traffic"] = write_csv(tr, out / "traffic.csv", provenance)
    paths["segments"] = write_csv(city.segments, out / "traffic_segments.csv", provenance)
    cal = city.calendar.copy()
    cal["date"] = cal["date"].dt.strftime("%Y-%m-%d")
    for c in ("is_school_break", "is_national_holiday"):
        cal[c] = cal[c].astype(int)
    paths["calendar"] = write_csv(cal, out / "calendar.csv", provenance)
    return paths


def write_corpus(corpus: Corpus, out_dir, provenance: Optional[dict] = None) -> Dict[str, Path]:
    out = Path(out_dir)
    log = corpus.log.copy()
    log["transit_date"] = pd.to_datetime(log["transit_date"]).dt.strftime("%Y-%m-%d")
    return {
        "apc": write_apc_file(corpus.noisy, out / "apc.csv", provenance=provenance),
        "corruption_log": write_csv(log, out / "corruption_log.csv", provenance),
    }
