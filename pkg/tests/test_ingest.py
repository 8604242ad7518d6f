import datetime as dt

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from tlf.ingest import (
    ApcSchema, IngestError, iter_records, parse_apc_file, parse_calendar_file, parse_gtfs,
    parse_segments_file, parse_traffic_file, parse_weather_file, records_to_frame, write_apc_file,
    gtfs_time_to_seconds, seconds_to_gtfs_time,
)
from tlf.io import read_provenance
from tlf.synth import write_city

HEADER = ("transit_date,trip_id,block_id,route_id,direction,vehicle_id,stop_id,stop_sequence,"
          "scheduled_arrival,actual_arrival,ons,offs,load,scheduled_headway,zero_load_at_trip_end\n")


def _row(**kw):
    base = dict(transit_date="2021-10-04", trip_id="T1", block_id="B1", route_id="R1", direction="EAST",
                vehicle_id="V1", stop_id="S1", stop_sequence="1", scheduled_arrival="2021-10-04T07:00:00",
                actual_arrival="2021-10-04T07:01:00", ons="3", offs="0", load="3", scheduled_headway="600",
                zero_load_at_trip_end="1")
    base.update(kw)
    return ",".join(base.values()) + "\n"


def test_apc_parse_and_diagnostics(tmp_path):
    path = tmp_path / "apc.csv"
    path.write_text(HEADER + _row() + _row(stop_sequence="x") + _row(trip_id="") + _row(ons="-2")
                    + _row(actual_arrival="", ons="", offs=""))
    res = parse_apc_file(path)
    assert res.n_rows == 5
    assert len(res.records) == 3
    assert res.n_fatal == 2
    d = res.diagnostics
    fatal = d[d["fatal"]]
    assert set(zip(fatal["row"], fatal["field"], fatal["reason"])) == {
        (2, "stop_sequence", "unparseable value"), (3, "trip_id", "missing value")}
    assert ((d["row"] == 4) & (d["reason"] == "negative count")).any()
    last = res.records.iloc[-1]
    assert pd.isna(last["ons"]) and pd.isna(last["actual_arrival"])


def test_apc_missing_column(tmp_path):
    path = tmp_path / "apc.csv"
    path.write_text("transit_date,trip_id\n2021-10-04,T1\n")
    with pytest.raises(IngestError, match="missing mandatory column"):
        parse_apc_file(path)
    with pytest.raises(IngestError, match="missing file"):
        parse_apc_file(tmp_path / "nope.csv")


def test_apc_schema_mapping(tmp_path):
    path = tmp_path / "apc.csv"
    path.write_text(HEADER.replace("load,", "occupancy,") + _row(load="9"))
    schema = ApcSchema.from_mapping({"load": "occupancy"})
    assert int(parse_apc_file(path, schema).records["load"].iloc[0]) == 9
    with pytest.raises(IngestError):
        ApcSchema.from_mapping({"bogus": "x"})


def test_apc_roundtrip(small_corpus, tmp_path):
    frame = small_corpus.noisy.head(3000)
    path = write_apc_file(frame, tmp_path / "apc.csv", provenance={"seed": 1})
    assert read_provenance(path) == {"seed": 1}
    res = parse_apc_file(path)
    assert res.n_fatal == 0
    back = res.records
    for c in ("trip_id", "stop_id", "direction"):
        assert back[c].tolist() == frame[c].tolist()
    for c in ("ons", "offs", "load", "stop_sequence"):
        assert back[c].astype("Float64").fillna(-999).tolist() == frame[c].astype("Float64").fillna(-999).tolist()
    assert (back["scheduled_arrival"].to_numpy() == frame["scheduled_arrival"].to_numpy()).all()


def test_records_roundtrip(small_corpus):
    frame = small_corpus.noisy.head(200).reset_index(drop=True)
    recs = list(iter_records(frame))
    assert isinstance(recs[0].transit_date, dt.date)
    again = list(iter_records(records_to_frame(recs)))
    assert recs == again


@given(st.integers(0, 30 * 3600 - 1))
def test_gtfs_time_roundtrip(seconds):
    text = seconds_to_gtfs_time([seconds])
    assert gtfs_time_to_seconds(pd.Series(text))[0] == seconds


@pytest.fixture(scope="module")
def written_city(small_city, tmp_path_factory):
    out = tmp_path_factory.mktemp("city")
    return write_city(small_city, out), small_city


def test_gtfs_roundtrip(written_city):
    paths, city = written_city
    g = parse_gtfs(paths["gtfs"])
    assert set(g.trips["trip_id"]) == set(city.gtfs.trips["trip_id"])
    assert len(g.stop_times) == len(city.gtfs.stop_times)
    assert (g.stop_times.groupby("trip_id")["stop_sequence"].diff().dropna() > 0).all()


def test_gtfs_broken_reference(written_city, tmp_path):
    paths, _ = written_city
    d = tmp_path / "g"
    d.mkdir()
    for f in paths["gtfs"].glob("*.txt"):
        (d / f.name).write_text(f.read_text())
    st_ = pd.read_csv(d / "stop_times.txt", dtype=str)
    st_.loc[0, "stop_id"] = "NOPE"
    st_.to_csv(d / "stop_times.txt", index=False)
    with pytest.raises(IngestError, match="unknown stop_id 'NOPE'"):
        parse_gtfs(d)


def test_context_files(written_city):
    paths, city = written_city
    w = parse_weather_file(paths["weather"])
    assert w.n_fatal == 0 and len(w.records) == len(city.weather)
    t = parse_traffic_file(paths["traffic"])
    assert t.n_fatal == 0 and len(t.records) == len(city.traffic)
    s = parse_segments_file(paths["segments"])
    assert s["geometry"].iloc[0].geom_type == "LineString"
    c = parse_calendar_file(paths["calendar"])
    assert c.records["is_school_break"].dtype == bool


def test_weather_validation(tmp_path):
    path = tmp_path / "w.csv"
    path.write_text("station_id,latitude,longitude,timestamp,temperature,humidity,precipitation_intensity\n"
                    "A,36,-86,2021-10-01T05:00:00,10,0.5,0\n"
                    "A,36,-86,2021-10-01T05:30:00,10,0.5,0\n"
                    "A,36,-86,2021-10-01T06:00:00,10,1.5,0\n"
                    "A,36,-86,2021-10-01T07:00:00,10,0.5,-1\n")
    res = parse_weather_file(path)
    assert len(res.records) == 1
    assert set(res.diagnostics["reason"]) == {"not aligned to a whole hour", "humidity outside [0, 1]",
                                              "negative precipitation"}


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50)), min_size=1, max_size=20))
def test_apc_counts_roundtrip(tmp_path_factory, pairs):
    path = tmp_path_factory.mktemp("p") / "apc.csv"
    body = "".join(_row(stop_sequence=str(i + 1), ons=str(a), offs=str(b)) for i, (a, b) in enumerate(pairs))
    path.write_text(HEADER + body)
    rec = parse_apc_file(path).records
    assert list(zip(rec["ons"].astype(int), rec["offs"].astype(int))) == pairs
    assert np.all(rec["row"].to_numpy() == np.arange(1, len(pairs) + 1))
