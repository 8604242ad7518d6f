import datetime as dt

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from tlf.domain import (
    DomainError, EvalRecord, Level, LowHigh, Scheme, bin_levels, bin_stop_load, bin_trip_load,
    low_high_levels, low_high_of, n_windows, prediction_levels, round_half_up, time_window_of,
    time_windows,
)
from oracles import STOP_RANGES, TRIP_RANGES, bin_by_table


@pytest.mark.parametrize("load,level", [
    (0, 0), (6, 0), (7, 1), (12, 1), (13, 2), (54, 2), (55, 3), (75, 3), (76, 4), (500, 4),
])
def test_trip_bin_edges(load, level):
    assert int(bin_trip_load(load)) == level


@pytest.mark.parametrize("load,level", [
    (0, 0), (5, 0), (6, 1), (11, 1), (12, 2), (16, 2), (17, 3), (29, 3), (30, 4), (99, 4),
])
def test_stop_bin_edges(load, level):
    assert int(bin_stop_load(load)) == level


def test_negative_load_rejected():
    with pytest.raises(DomainError):
        bin_trip_load(-1)
    with pytest.raises(DomainError):
        bin_levels([3, -2], Scheme.STOP)


@given(st.integers(0, 10_000))
def test_bins_match_table(load):
    assert int(bin_trip_load(load)) == bin_by_table(load, TRIP_RANGES)
    assert int(bin_stop_load(load)) == bin_by_table(load, STOP_RANGES)


@given(st.lists(st.integers(0, 300), min_size=2, max_size=50))
def test_bins_monotone(loads):
    loads = sorted(loads)
    for scheme in Scheme:
        assert np.all(np.diff(bin_levels(loads, scheme)) >= 0)


def test_round_half_up():
    assert list(round_half_up(np.array([0.5, 1.5, 2.5, 2.49, -0.4]))) == [1, 2, 3, 2, 0]


@pytest.mark.parametrize("pred,level", [(-3.2, 0), (6.49, 0), (6.5, 1), (12.4, 1), (12.5, 2), (75.5, 4)])
def test_prediction_levels(pred, level):
    assert prediction_levels([pred], Scheme.TRIP)[0] == level


def test_time_windows():
    assert n_windows(30) == 48
    assert time_window_of(dt.time(0, 29), 30) == 0
    assert time_window_of(dt.time(13, 30), 30) == 27
    assert time_window_of(dt.datetime(2021, 1, 1, 23, 59), 60) == 23
    got = time_windows(pd.Series(pd.to_datetime(["2021-01-01T07:14", "2021-01-01T07:15"])), 15)
    assert list(got) == [28, 29]


@given(st.integers(0, 23), st.integers(0, 59), st.sampled_from([5, 10, 15, 20, 30, 60]))
def test_window_bounds(h, m, width):
    w = time_window_of(dt.time(h, m), width)
    assert 0 <= w < n_windows(width)
    assert w * width <= h * 60 + m < (w + 1) * width


def test_low_high():
    assert low_high_of(11) == LowHigh.LOW
    assert low_high_of(12) == LowHigh.HIGH
    assert low_high_of(bin_trip_load(7)) == LowHigh.LOW
    assert low_high_of(bin_trip_load(13)) == LowHigh.HIGH
    assert list(low_high_levels([0, 1, 2, 3, 4])) == [0, 0, 1, 1, 1]
    assert Level.HIGH.label


def test_eval_record_range():
    assert EvalRecord(3, 1).y_error == 2
    with pytest.raises(DomainError):
        EvalRecord(5, 0)
