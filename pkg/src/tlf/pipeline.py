"""Pipeline stages shared by the CLI and the experiment scripts.

Every stage reads its inputs from files under ``config.out`` and writes its
outputs there, each stamped with the config and version.
"""

from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from tlf import baselines as bl
from tlf import evaluation as ev
from tlf import features as ft
from tlf import gbt
from tlf import plots
from tlf import seq2seq as s2s
from tlf.clean import filter_trips
from tlf.config import PipelineConfig
from tlf.domain import ConfigError, Scheme, bin_levels
from tlf.fuse import (aggregate_stops, aggregate_trips, compute_actual_headway, join_calendar,
                      join_traffic, join_weather, read_stops, read_trips, stops_to_text, trips_to_text,
                      Diagnostics)
from tlf.ingest import (ApcSchema, IngestError, parse_apc_file, parse_calendar_file, parse_gtfs,
                        parse_segments_file, parse_traffic_file, parse_weather_file,
                        merge_weather_sources, write_apc_file)
from tlf.io import make_provenance, read_csv, write_csv, write_json
from tlf.synth import generate_city, generate_corpus, write_city, write_corpus

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A stage could not run; the message names the offending file or key."""


@contextmanager
def timed(stage: str):
    t0 = time.perf_counter()
    log.info("%s: start", stage)
    yield
    log.info("%s: done in %.1fs", stage, time.perf_counter() - t0)


class Layout:
    """Output paths under the configured directory."""

    def __init__(self, cfg: PipelineConfig):
        self.root = Path(cfg.out)
        self.synth = self.root / "synth"
        self.ingest = self.root / "ingest"
        self.clean = self.root / "clean"
        self.fused = self.root / "fused"
        self.models = self.root / "models"
        self.eval = self.root / "eval"

    def model_path(self, level: str) -> Path:
        return self.models / ("seq2seq.json" if level == "stop" else f"gbt_{level}.json")


def provenance(cfg: PipelineConfig) -> dict:
    return make_provenance(cfg.to_dict())


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise StageError(f"missing input {path} ({hint})")
    return path


# --- synth / ingest / clean / fuse -----------------------------------------

def run_synth(cfg: PipelineConfig, threads: int = 1) -> Dict[str, Path]:
    lay = Layout(cfg)
    prov = provenance(cfg)
    with timed("synth"):
        city = generate_city(cfg.synth)
        corpus = generate_corpus(city, threads)
        paths = write_city(city, lay.synth, prov)
        paths.update(write_corpus(corpus, lay.synth, prov))
        log.info("synth: %d stop events, %d corruptions", len(corpus.noisy), len(corpus.log))
    return paths


@dataclass
class InputPaths:
    apc: Path
    gtfs: Path
    weather: List[Path]
    traffic: Path
    segments: Path
    calendar: Path
    corruption_log: Optional[Path]


def input_paths(cfg: PipelineConfig) -> InputPaths:
    lay = Layout(cfg)
    i = cfg.inputs
    pick = lambda v, default: Path(v) if v else default  # noqa: E731
    weather = [Path(w) for w in i.weather] if i.weather else [lay.synth / "weather.csv"]
    log_path = lay.synth / "corruption_log.csv" if not i.apc else None
    return InputPaths(pick(i.apc, lay.synth / "apc.csv"), pick(i.gtfs, lay.synth / "gtfs"), weather,
                      pick(i.traffic, lay.synth / "traffic.csv"),
                      pick(i.segments, lay.synth / "traffic_segments.csv"),
                      pick(i.calendar, lay.synth / "calendar.csv"),
                      log_path if log_path is not None and log_path.exists() else None)


@dataclass
class Context:
    gtfs: object
    weather: pd.DataFrame
    traffic: pd.DataFrame
    segments: pd.DataFrame
    calendar: pd.DataFrame
    diagnostics: pd.DataFrame


def load_context(cfg: PipelineConfig) -> Context:
    """Parse GTFS, weather, traffic, segments and calendar inputs."""
    p = input_paths(cfg)
    for path in [p.gtfs, *p.weather, p.traffic, p.segments, p.calendar]:
        _require(path, "run `tlf synth` or set inputs in the config")
    diags = []
    try:
        gtfs = parse_gtfs(p.gtfs)
        parsed = [parse_weather_file(w) for w in p.weather]
        traffic = parse_traffic_file(p.traffic)
        segments = parse_segments_file(p.segments)
        calendar = parse_calendar_file(p.calendar)
    except IngestError as exc:
        raise StageError(str(exc)) from exc
    for path, res in [*zip(p.weather, parsed), (p.traffic, traffic), (p.calendar, calendar)]:
        if len(res.diagnostics):
            diags.append(res.diagnostics.assign(file=str(path)))
    weather = merge_weather_sources([r.records for r in parsed])
    d = pd.concat(diags, ignore_index=True) if diags else pd.DataFrame(
        columns=["row", "field", "reason", "fatal", "file"])
    return Context(gtfs, weather, traffic.records, segments, calendar.records, d)


def run_ingest(cfg: PipelineConfig) -> Dict[str, Path]:
    lay = Layout(cfg)
    prov = provenance(cfg)
    p = input_paths(cfg)
    with timed("ingest"):
        apc = parse_apc_file(_require(p.apc, "APC input"), ApcSchema.from_mapping(cfg.inputs.apc_columns))
        ctx = load_context(cfg)
        diags = pd.concat([apc.diagnostics.assign(file=str(p.apc)), ctx.diagnostics], ignore_index=True)
        summary = {
            "apc_rows": apc.n_rows, "apc_records": len(apc.records), "apc_fatal_rows": apc.n_fatal,
            "weather_rows": len(ctx.weather), "traffic_rows": len(ctx.traffic),
            "segments": len(ctx.segments), "calendar_days": len(ctx.calendar),
            "gtfs_trips": len(ctx.gtfs.trips), "gtfs_stops": len(ctx.gtfs.stops),
            "diagnostics": len(diags),
        }
        out = {"diagnostics": write_csv(diags[["file", "row", "field", "reason", "fatal"]],
                                        lay.ingest / "diagnostics.csv", prov),
               "summary": write_json(summary, lay.ingest / "summary.json", prov)}
    return out


def cleaning_oracle(verdicts: pd.DataFrame, corruption_log: pd.DataFrame) -> dict:
    """Precision/recall of flagged trip instances against an injected-corruption log."""
    flagged = {(pd.Timestamp(d), t) for d, t, _ in verdicts.index[~verdicts["valid"]]}
    truth = {(pd.Timestamp(d), t) for d, t in zip(corruption_log["transit_date"], corruption_log["trip_id"])}
    tp = len(flagged & truth)
    return {"flagged": len(flagged), "injected": len(truth), "true_positives": tp,
            "precision": tp / len(flagged) if flagged else 1.0,
            "recall": tp / len(truth) if truth else 1.0}


def run_clean(cfg: PipelineConfig) -> Dict[str, Path]:
    lay = Layout(cfg)
    prov = provenance(cfg)
    p = input_paths(cfg)
    with timed("clean"):
        apc = parse_apc_file(_require(p.apc, "APC input"), ApcSchema.from_mapping(cfg.inputs.apc_columns))
        kept, report, verdicts = filter_trips(apc.records, cfg.clean)
        summary = {"trips_in": report.trips_in, "trips_out": report.trips_out,
                   "trips_rejected": report.trips_rejected, "rejected_by_rule": report.rejected_by_rule,
                   "clamp_events": report.clamp_events, "null_counts_filled": report.null_counts_filled,
                   "fraction_clean": report.fraction_clean, "apc_fatal_rows": apc.n_fatal}
        if p.corruption_log is not None:
            clog = read_csv(p.corruption_log, dtype={"trip_id": str})
            clog["transit_date"] = pd.to_datetime(clog["transit_date"])
            summary["oracle"] = cleaning_oracle(verdicts, clog)
        v = verdicts.reset_index()
        v["transit_date"] = v["transit_date"].dt.strftime("%Y-%m-%d")
        for c in ["R1", "R2", "R3", "R4", "R5", "R6", "valid"]:
            v[c] = v[c].astype(int)
        out = {
            "apc_clean": write_apc_file(kept, lay.clean / "apc_clean.csv", provenance=prov),
            "report": write_csv(report.to_frame(), lay.clean / "clean_report.csv", prov),
            "summary": write_json(summary, lay.clean / "clean_report.json", prov),
            "verdicts": write_csv(v, lay.clean / "verdicts.csv", prov),
        }
    log.info("clean: kept %d of %d trips", report.trips_out, report.trips_in)
    return out


def fuse_records(cfg: PipelineConfig, records: pd.DataFrame, ctx: Context) -> Tuple[pd.DataFrame, pd.DataFrame, Diagnostics]:
    diag = Diagnostics()
    rec = join_weather(records, ctx.weather, ctx.gtfs.stops, diag)
    rec = join_traffic(rec, ctx.gtfs, ctx.traffic, ctx.segments, diagnostics=diag)
    rec = join_calendar(rec, ctx.calendar, diag)
    rec = compute_actual_headway(rec)
    return aggregate_trips(rec, cfg.window_minutes), aggregate_stops(rec, cfg.stop_window_minutes), diag


def run_fuse(cfg: PipelineConfig) -> Dict[str, Path]:
    lay = Layout(cfg)
    prov = provenance(cfg)
    with timed("fuse"):
        clean = parse_apc_file(_require(lay.clean / "apc_clean.csv", "run `tlf clean` first"))
        records = clean.records.assign(is_clean=True)
        ctx = load_context(cfg)
        trips, stops, diag = fuse_records(cfg, records, ctx)
        out = {
            "trips": write_csv(trips_to_text(trips), lay.fused / "trips.csv", prov, float_format="%.10g"),
            "stops": write_csv(stops_to_text(stops), lay.fused / "stops.csv", prov, float_format="%.10g"),
            "diagnostics": write_csv(diag.to_frame(), lay.fused / "fuse_diagnostics.csv", prov),
        }
        log.info("fuse: %d trips, %d stop rows", len(trips), len(stops))
    return out


# --- trip level --------------------------------------------------------------

def trip_frame(cfg: PipelineConfig, level: str) -> pd.DataFrame:
    trips = read_trips(_require(Layout(cfg).fused / "trips.csv", "run `tlf fuse` first"))
    if level == "trip-dayahead":
        trips = ft.add_day_ahead_features(trips, cfg.features.p)
    return trips


def trip_split(cfg: PipelineConfig, trips: pd.DataFrame):
    return ft.split_trip_data(trips, cfg.features.trip_split_ratio, cfg.seed)


def train_trip(cfg: PipelineConfig, level: str) -> Dict[str, Path]:
    lay = Layout(cfg)
    prov = provenance(cfg)
    with timed(f"train {level}"):
        trips = trip_frame(cfg, level)
        train, _ = trip_split(cfg, trips)
        schema = ft.trip_schema(train, level == "trip-dayahead", cfg.features.day_feature)
        X = schema.encode(train)
        y = train["max_load"].to_numpy(dtype=float)
        params = cfg.gbt.params
        if cfg.gbt.grid_search:
            params, table = gbt.grid_search(X, y, cfg.gbt.grid, params, cfg.gbt.cv_folds, cfg.seed,
                                            schema.columns)
        else:
            cv = gbt.cross_validate(X, y, params, cfg.gbt.cv_folds, cfg.seed, schema.columns)
            table = pd.DataFrame([{"n_trees": params.n_trees, "max_depth": params.max_depth,
                                   "learning_rate": params.learning_rate, "mean_rmse": cv.mean_rmse,
                                   "sd_rmse": cv.sd_rmse}])
        ens = gbt.fit(X, y, params, schema.columns)
        model = {**ens.to_dict(), "schema": schema.to_dict(), "level": level, "n_train": len(train)}
        out = {"model": write_json(model, lay.model_path(level), prov),
               "cv": write_csv(table, lay.models / f"cv_{level}.csv", prov, float_format="%.10g")}
        log.info("train %s: %d rows, cv rmse %.4f", level, len(train), float(table["mean_rmse"].min()))
    return out


def load_trip_model(path: Path, level: Optional[str] = None):
    data = json.loads(_require(path, "run `tlf train` first").read_text())
    if level is not None and data.get("level") != level:
        raise StageError(f"{path}: model level {data.get('level')!r} does not match --level {level!r}")
    schema = ft.FeatureSchema.from_dict(data["schema"])
    try:
        ens = gbt.GbtEnsemble.from_dict(data)
    except gbt.ModelError as exc:
        raise StageError(f"{path}: {exc}") from exc
    expected = gbt.fingerprint(schema.columns)
    if expected != ens.fingerprint:
        raise StageError(f"{path}: schema fingerprint {expected} does not match model fingerprint "
                         f"{ens.fingerprint}")
    return ens, schema, data["level"]


def _check_columns(frame: pd.DataFrame, needed, path) -> None:
    missing = [c for c in needed if c not in frame]
    if missing:
        raise StageError(f"{path}: missing columns {missing}")


def trip_predictions(ens, schema, rows: pd.DataFrame) -> Tuple[np.ndarray, np.ndarray]:
    raw = gbt.predict(ens, schema.encode(rows), schema.columns)
    return raw, gbt.predict_levels(ens, schema.encode(rows), schema.columns)


def _write_report(lay_dir: Path, reports: List[ev.EvalReport], prov, window_minutes: int,
                  extra: dict, primary: str) -> Dict[str, Path]:
    out = {}
    hist = []
    for r in reports:
        hist += [{"model": r.name, "y_error": int(k), "count": int(v)} for k, v in r.histogram.items()]
    out["histogram"] = write_csv(pd.DataFrame(hist), lay_dir / "error_histogram.csv", prov)
    rw = pd.concat([r.rmse_by_window.assign(model=r.name) for r in reports], ignore_index=True)
    out["rmse_by_window"] = write_csv(rw[["model", "time_window", "n", "rmse"]],
                                      lay_dir / "rmse_by_window.csv", prov, float_format="%.10g")
    lh = pd.DataFrame([{"model": r.name, **r.low_high} for r in reports])
    out["low_high"] = write_csv(lh, lay_dir / "low_high.csv", prov, float_format="%.10g")
    mo = pd.concat([r.monthly.assign(model=r.name) for r in reports], ignore_index=True)
    out["monthly"] = write_csv(mo, lay_dir / "monthly_errors.csv", prov)
    for r in reports:
        cm = pd.DataFrame(r.confusion, columns=[f"pred_{k}" for k in range(5)])
        cm.insert(0, "true", range(5))
        out[f"confusion_{r.name}"] = write_csv(cm, lay_dir / f"confusion_{r.name}.csv", prov)
    report = {"models": {r.name: r.to_dict() for r in reports}, **extra}
    out["report"] = write_json(report, lay_dir / "report.json", prov)
    out["svg_hist"] = plots.error_histogram({r.name: ev.abs_error_buckets(r.histogram) for r in reports},
                                            lay_dir / "error_histogram.svg", "absolute bin error", prov)
    out["svg_rmse"] = plots.rmse_by_window({r.name: r.rmse_by_window for r in reports},
                                           lay_dir / "rmse_by_window.svg", window_minutes,
                                           "RMSE per time window", prov)
    main = next(r for r in reports if r.name == primary)
    out["svg_confusion"] = plots.confusion_heatmap(main.confusion, lay_dir / "confusion.svg",
                                                   f"confusion ({primary})", prov)
    return out


def evaluate_trip(cfg: PipelineConfig, level: str, with_baselines: bool = True) -> Dict[str, Path]:
    lay = Layout(cfg)
    prov = provenance(cfg)
    with timed(f"evaluate {level}"):
        ens, schema, _ = load_trip_model(lay.model_path(level), level)
        trips = trip_frame(cfg, level)
        _, test = trip_split(cfg, trips)
        raw, pred = trip_predictions(ens, schema, test)
        y = test["target_bin"].to_numpy()
        w = test["time_window"].to_numpy()
        dates = test["transit_date"].to_numpy()
        reports = [ev.EvalReport.build("gbt", y, pred, w, dates, {
            "rmse_raw_load": gbt.rmse(test["max_load"], raw)})]
        if with_baselines:
            hist = bl.trip_history(trips)
            for weeks in cfg.eval.lookback_weeks:
                bp = bl.trip_baseline_frame(hist, test, weeks)
                reports.append(ev.EvalReport.build(f"baseline_{weeks}w", y, bp, w, dates))
        comparisons = {}
        for r in reports[1:]:
            comparisons[r.name] = {"correct_ratio": ev.correct_ratio(reports[0], r),
                                   "mistake_ratio": ev.mistake_ratio(reports[0], r)}
        extra = {"level": level, "n_test": len(test), "window_minutes": cfg.window_minutes,
                 "comparisons": comparisons}
        out = _write_report(lay.eval / level, reports, prov, cfg.window_minutes, extra, "gbt")
    return out


# --- stop level --------------------------------------------------------------

def stop_boundaries(cfg: PipelineConfig, stops: pd.DataFrame) -> ft.SplitBoundaries:
    f = cfg.features
    if f.train_end and f.validation_end:
        return ft.SplitBoundaries(pd.Timestamp(f.train_end), pd.Timestamp(f.validation_end))
    if f.train_end or f.validation_end:
        raise ConfigError("features.train_end and features.validation_end must be set together")
    return ft.SplitBoundaries.from_fractions(stops["transit_date"], tuple(f.stop_split_fractions))


@dataclass
class StopData:
    rows: pd.DataFrame  # output of sort_sequences
    samples: pd.DataFrame  # sample_index over rows
    split: np.ndarray  # 0 train / 1 validation / 2 test per sample
    boundaries: ft.SplitBoundaries


def stop_data(cfg: PipelineConfig, n_past: int, stops: Optional[pd.DataFrame] = None) -> StopData:
    if stops is None:
        stops = read_stops(_require(Layout(cfg).fused / "stops.csv", "run `tlf fuse` first"))
    rows = ft.sort_sequences(stops)
    b = stop_boundaries(cfg, rows)
    samples = s2s.sample_index(rows, n_past)
    d = rows["transit_date"].to_numpy()[samples["target"].to_numpy()]
    split = np.where(d <= np.datetime64(b.train_end), 0, np.where(d <= np.datetime64(b.validation_end), 1, 2))
    if not (split == 1).any():
        raise ConfigError("validation window is empty")
    return StopData(rows, samples, split, b)


def _cap(rng: np.random.Generator, values: np.ndarray, n: int) -> np.ndarray:
    if len(values) > n:
        values = rng.choice(values, n, replace=False)
    return np.sort(values)


def train_stop(cfg: PipelineConfig) -> Dict[str, Path]:
    lay = Layout(cfg)
    prov = provenance(cfg)
    sc = cfg.seq2seq
    with timed("train stop"):
        data = stop_data(cfg, sc.n_past)
        rows = data.rows
        train_rows = rows[rows["transit_date"] <= data.boundaries.train_end]
        encoder = s2s.StopEncoder.fit(train_rows)
        rng = np.random.default_rng(cfg.seed)
        targets = data.samples["target"].to_numpy()
        tr = _cap(rng, targets[data.split == 0], sc.max_train_samples)
        va = _cap(rng, targets[data.split == 1], sc.max_val_samples)
        A = s2s.gather(rows, tr, sc.n_past, encoder)
        V = s2s.gather(rows, va, sc.n_past, encoder)
        result = s2s.train(*A, sc, val=V)
        out = {"model": s2s.save_model(lay.model_path("stop"), result.params, sc, encoder, prov),
               "curve": write_csv(result.curve, lay.models / "loss_curve.csv", prov, float_format="%.10g")}
        log.info("train stop: %d samples, best epoch %d", len(tr), result.best_epoch)
    return out


def horizon_eval(cfg: PipelineConfig, params, encoder, data: StopData, n_trips: int,
                 min_stops: int, horizon: int, rng: np.random.Generator):
    """Seed with each sampled trip's first N stops and predict the next ``horizon``.

    Returns (chosen trip starts, truth (T, H), predictions by model name, target row positions).
    """
    rows = data.rows
    n_past = params_n_past(cfg)
    trip_samples = data.samples[(data.samples["pos"] == n_past) & (data.split == 2)
                                & (data.samples["trip_len"] >= min_stops)]
    first = trip_samples["target"].to_numpy()
    chosen = _cap(rng, first, n_trips)
    targets = chosen[:, None] + np.arange(horizon)[None, :]
    loads = rows["summed_load"].to_numpy()
    truth = bin_levels(loads[targets].astype(np.int64), Scheme.STOP)

    need = np.concatenate([(chosen[:, None] - np.arange(1, n_past + 1)[None, :]).ravel(), targets.ravel()])
    encoded = s2s.encode_rows(rows, need, encoder)
    seed = np.stack([np.stack([encoded[t - n_past + j] for j in range(n_past)]) for t in chosen]) \
        if len(chosen) else np.zeros((0, n_past, encoder.width))
    future = np.stack([np.stack([encoded[t] for t in row]) for row in targets]) \
        if len(chosen) else np.zeros((0, horizon, encoder.width))
    model = s2s.predict_horizon(params, encoder, seed, future, horizon) if len(chosen) \
        else np.zeros((0, horizon), np.int64)

    rolling = np.full_like(truth, bl.ABSTAIN)
    rolling[:, 0] = bin_levels(loads[chosen - 1].astype(np.int64), Scheme.STOP)

    hist = bl.stop_history(rows)
    q = rows.iloc[targets.ravel()]
    stat = bl.stop_baseline_frame(hist, q, cfg.eval.stop_baseline_mode,
                                  cfg.eval.stop_lookback_weeks).reshape(truth.shape)
    return chosen, truth, {"seq2seq": model, "rolling": rolling, "statistical": stat}, targets


def params_n_past(cfg: PipelineConfig) -> int:
    return cfg.seq2seq.n_past


def evaluate_stop(cfg: PipelineConfig, with_baselines: bool = True) -> Dict[str, Path]:
    lay = Layout(cfg)
    prov = provenance(cfg)
    e = cfg.eval
    with timed("evaluate stop"):
        params, sc, encoder = s2s.load_model(_require(lay.model_path("stop"), "run `tlf train --level stop`"))
        if encoder is None:
            raise StageError(f"{lay.model_path('stop')}: model carries no feature encoder")
        cfg_n = sc.n_past
        data = stop_data(cfg, cfg_n)
        rng = np.random.default_rng(cfg.seed + 1)
        chosen, truth, preds, targets = horizon_eval(cfg, params, encoder, data, e.n_eval_trips,
                                                     e.min_trip_stops, e.max_horizon, rng)
        if not with_baselines:
            preds = {"seq2seq": preds["seq2seq"]}
        table = ev.horizon_error_counts(truth, preds)
        rows = data.rows
        t1 = targets[:, 0]
        w = rows["time_window"].to_numpy()[t1]
        dates = rows["transit_date"].to_numpy()[t1]
        reports = [ev.EvalReport.build(name, truth[:, 0], p[:, 0], w, dates) for name, p in preds.items()]
        abst = {name: int((p == bl.ABSTAIN).sum()) for name, p in preds.items()}
        extra = {"level": "stop", "n_eval_trips": int(len(chosen)), "n_past": cfg_n,
                 "max_horizon": e.max_horizon, "window_minutes": cfg.stop_window_minutes,
                 "abstentions": abst,
                 "horizon_errors": table.assign(abs_error=table["abs_error"].astype(str)).to_dict(orient="records")}
        d = lay.eval / "stop"
        out = _write_report(d, reports, prov, cfg.stop_window_minutes, extra, "seq2seq")
        out["horizon"] = write_csv(table, d / "horizon_errors.csv", prov)
        out["svg_horizon"] = plots.horizon_errors(table, d / "horizon_errors.svg", "errors per future stop", prov)
    return out


# --- predict / report --------------------------------------------------------

def run_predict(cfg: PipelineConfig, level: str, model_path: Path, query_path: Path,
                out_path: Path) -> Path:
    prov = provenance(cfg)
    _require(query_path, "query file")
    if level == "stop":
        params, sc, encoder = s2s.load_model(_require(model_path, "model file"))
        try:
            stops = read_stops(query_path)
        except KeyError as exc:
            raise StageError(f"{query_path}: missing columns {exc}") from exc
        rows = ft.sort_sequences(stops)
        samples = s2s.sample_index(rows, sc.n_past)
        tg = samples["target"].to_numpy()
        enc, dec, _ = s2s.gather(rows, tg, sc.n_past, encoder)
        probs = np.concatenate([s2s.forward(params, enc[i:i + 2048], dec[i:i + 2048])
                                for i in range(0, len(tg), 2048)]) if len(tg) else np.zeros((0, 5))
        keys = rows.iloc[tg][["transit_date", "trip_id", "stop_id", "stop_sequence"]].copy()
        keys["transit_date"] = keys["transit_date"].dt.strftime("%Y-%m-%d")
        keys["predicted_bin"] = probs.argmax(axis=1) if len(tg) else np.zeros(0, np.int64)
        keys["raw_score"] = probs.max(axis=1) if len(tg) else np.zeros(0)
        return write_csv(keys, out_path, prov, float_format="%.10g")
    ens, schema, _ = load_trip_model(model_path, level)
    try:
        trips = read_trips(query_path)
    except KeyError as exc:
        raise StageError(f"{query_path}: missing columns {exc}") from exc
    if level == "trip-dayahead":
        trips = ft.add_day_ahead_features(trips, cfg.features.p)
    raw, levels = trip_predictions(ens, schema, trips)
    out = trips[["transit_date", "trip_id", "route_id", "direction", "time_window"]].copy()
    out["transit_date"] = out["transit_date"].dt.strftime("%Y-%m-%d")
    out["predicted_bin"] = levels
    out["raw_score"] = raw
    return write_csv(out, out_path, prov, float_format="%.10g")


def run_report(cfg: PipelineConfig) -> Path:
    lay = Layout(cfg)
    prov = provenance(cfg)
    summary = {}
    for level_dir in sorted(p for p in lay.eval.glob("*") if (p / "report.json").exists()):
        rep = json.loads((level_dir / "report.json").read_text())
        summary[level_dir.name] = {
            name: {"rmse_bins": m["rmse_bins"], "f1": m["low_high"]["f1"],
                   "precision": m["low_high"]["precision"], "recall": m["low_high"]["recall"],
                   "evaluated": m["evaluated"], "abstained": m["abstained"],
                   "correct": m["abs_error_buckets"]["0"]}
            for name, m in rep["models"].items()}
    clean = lay.clean / "clean_report.json"
    if clean.exists():
        c = json.loads(clean.read_text())
        summary["clean"] = {k: c[k] for k in ("trips_in", "trips_out", "rejected_by_rule", "clamp_events")}
        if "oracle" in c:
            summary["clean"]["oracle"] = c["oracle"]
    if not summary:
        raise StageError(f"no evaluation reports under {lay.eval}; run `tlf evaluate` first")
    return write_json({"summary": summary}, lay.root / "report.json", prov)


def run_all(cfg: PipelineConfig, threads: int = 1, synth: bool = True) -> None:
    if synth and not cfg.inputs.apc:
        run_synth(cfg, threads)
    run_clean(cfg)
    run_fuse(cfg)
    for level in ("trip-anyday", "trip-dayahead"):
        train_trip(cfg, level)
        evaluate_trip(cfg, level)
    train_stop(cfg)
    evaluate_stop(cfg)
    run_report(cfg)
