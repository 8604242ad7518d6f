"""Trip-level validity rules, trip filtering and occupancy derivation.

Rules (a trip is discarded as a whole if any applies):

R1  any recorded load below ``min_load`` (-5)
R2  ons/offs imbalance ratio above ``max_imbalance`` (0.2)
R3  every actual arrival is null
R4  every offs count is null
R5  exact duplicate of an earlier instance of the same trip on the same date
R6  present actual arrivals decrease along the stop sequence
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Optional, Sequence, Tuple, Union

import numba
import numpy as np
import pandas as pd

from tlf.domain import ApcRecord

log = logging.getLogger(__name__)

RULES = ("R1", "R2", "R3", "R4", "R5", "R6")
RULE_DESCRIPTIONS = {
    "R1": "recorded occupancy below threshold",
    "R2": "ons/offs imbalance above threshold",
    "R3": "all actual arrival times null",
    "R4": "all offs null",
    "R5": "duplicate of a prior trip",
    "R6": "stop entries out of chronological sequence",
}

TRIP_KEY = ["transit_date", "trip_id", "instance"]
PAYLOAD = ["stop_id", "stop_sequence", "ons", "offs", "scheduled_arrival"]


@dataclass(frozen=True)
class ValidityRule:
    id: str
    description: str


VALIDITY_RULES = tuple(ValidityRule(r, RULE_DESCRIPTIONS[r]) for r in RULES)


@dataclass(frozen=True)
class CleanThresholds:
    min_load: int = -5
    max_imbalance: float = 0.2


@dataclass(frozen=True)
class Verdict:
    rules: FrozenSet[str] = frozenset()

    @property
    def valid(self) -> bool:
        return not self.rules


@dataclass
class CleanReport:
    rejected_by_rule: Dict[str, int] = field(default_factory=lambda: {r: 0 for r in RULES})
    trips_in: int = 0
    trips_out: int = 0
    clamp_events: int = 0
    null_counts_filled: int = 0

    @property
    def trips_rejected(self) -> int:
        return self.trips_in - self.trips_out

    @property
    def fraction_clean(self) -> float:
        return self.trips_out / self.trips_in if self.trips_in else 1.0

    def to_frame(self) -> pd.DataFrame:
        rows = [{"item": r, "description": RULE_DESCRIPTIONS[r], "trips": n}
                for r, n in self.rejected_by_rule.items()]
        rows += [
            {"item": "trips_in", "description": "trips read", "trips": self.trips_in},
            {"item": "trips_out", "description": "trips kept", "trips": self.trips_out},
            {"item": "trips_rejected", "description": "trips removed (any rule)",
             "trips": self.trips_rejected},
            {"item": "clamp_events", "description": "derived loads clamped at zero",
             "trips": self.clamp_events},
        ]
        return pd.DataFrame(rows)


def imbalance_ratio(ons_sum: float, offs_sum: float, expected_end_load: float) -> float:
    """Trip conservation error relative to the larger count total."""
    return abs(ons_sum - offs_sum - expected_end_load) / max(ons_sum, offs_sum, 1)


def _payload(rec: ApcRecord):
    return (rec.stop_id, rec.stop_sequence, rec.ons, rec.offs, rec.scheduled_arrival)


def classify_trip(records: Sequence[ApcRecord], thresholds: CleanThresholds = CleanThresholds(),
                  earlier: Iterable[Sequence[ApcRecord]] = ()) -> Verdict:
    """Check one trip instance against R1-R6.

    ``earlier`` holds the previously seen instances of the same trip on the
    same date; R5 fires when this instance's payload equals one of them.
    """
    if not records:
        return Verdict(frozenset({"R3"}))
    recs = sorted(records, key=lambda r: r.stop_sequence)
    hit = set()
    if any(r.load is not None and r.load < thresholds.min_load for r in recs):
        hit.add("R1")
    both = [r for r in recs if r.ons is not None and r.offs is not None]
    if both:
        expected = 0
        if not recs[0].zero_load_at_trip_end and recs[-1].load is not None:
            expected = recs[-1].load
        ratio = imbalance_ratio(sum(r.ons for r in both), sum(r.offs for r in both), expected)
        if ratio > thresholds.max_imbalance:
            hit.add("R2")
    if all(r.actual_arrival is None for r in recs):
        hit.add("R3")
    if all(r.offs is None for r in recs):
        hit.add("R4")
    mine = [_payload(r) for r in recs]
    if any(sorted(map(_payload, other), key=lambda p: p[1]) == mine for other in earlier):
        hit.add("R5")
    times = [r.actual_arrival for r in recs if r.actual_arrival is not None]
    if any(b < a for a, b in zip(times, times[1:])):
        hit.add("R6")
    return Verdict(frozenset(hit))


def add_instance(frame: pd.DataFrame) -> pd.DataFrame:
    """Number repeated copies of a (date, trip) in file order (0 = first seen)."""
    out = frame.copy()
    out["instance"] = out.groupby(["transit_date", "trip_id", "stop_sequence"], sort=False).cumcount()
    return out


def classify_frame(frame: pd.DataFrame, thresholds: CleanThresholds = CleanThresholds()) -> pd.DataFrame:
    """Vectorised rule evaluation; one row per trip instance with a column per rule."""
    if "instance" not in frame:
        frame = add_instance(frame)
    df = frame.reset_index(drop=True)
    df["_order"] = np.arange(len(df))
    df = df.sort_values(TRIP_KEY + ["stop_sequence"], kind="stable")
    g = df.groupby(TRIP_KEY, sort=False)

    ons = df["ons"].astype("Float64")
    offs = df["offs"].astype("Float64")
    load = df["load"].astype("Float64")
    both = ons.notna() & offs.notna()
    tmp = pd.DataFrame({
        "r1": (load < thresholds.min_load).fillna(False).to_numpy(),
        "ons_b": ons.where(both, 0).fillna(0).to_numpy(dtype=float),
        "offs_b": offs.where(both, 0).fillna(0).to_numpy(dtype=float),
        "both": both.to_numpy(),
        "arr": df["actual_arrival"].notna().to_numpy(),
        "offs_present": offs.notna().to_numpy(),
    }, index=df.index)
    for c in TRIP_KEY:
        tmp[c] = df[c]
    agg = tmp.groupby(TRIP_KEY, sort=False).agg(
        r1=("r1", "any"), ons_sum=("ons_b", "sum"), offs_sum=("offs_b", "sum"),
        any_both=("both", "any"), any_arr=("arr", "any"), any_offs=("offs_present", "any"))
    first_order = g["_order"].min()
    zero_end = g["zero_load_at_trip_end"].first()
    end_load = g["load"].last().astype("Float64").fillna(0).to_numpy(dtype=float)
    expected = np.where(zero_end.to_numpy(dtype=bool), 0.0, end_load)
    ratio = np.abs(agg["ons_sum"] - agg["offs_sum"] - expected) / np.maximum(
        np.maximum(agg["ons_sum"], agg["offs_sum"]), 1.0)
    out = pd.DataFrame(index=agg.index)
    out["R1"] = agg["r1"]
    out["R2"] = agg["any_both"] & (ratio > thresholds.max_imbalance)
    out["R3"] = ~agg["any_arr"]
    out["R4"] = ~agg["any_offs"]
    out["R5"] = False
    # R6: consecutive present arrivals must not decrease
    present = df.loc[df["actual_arrival"].notna(), TRIP_KEY + ["actual_arrival"]]
    step = present.groupby(TRIP_KEY, sort=False)["actual_arrival"].diff()
    bad = present.loc[step < pd.Timedelta(0), TRIP_KEY].drop_duplicates()
    out["R6"] = False
    if len(bad):
        out.loc[pd.MultiIndex.from_frame(bad), "R6"] = True
    # R5: only later copies can be duplicates; compare exactly against earlier ones
    repeats = out.index[out.index.get_level_values("instance") > 0]
    if len(repeats):
        pairs = set((d, t) for d, t, _ in repeats)
        sub = df[pd.MultiIndex.from_frame(df[["transit_date", "trip_id"]]).isin(pairs)]
        by_key = {k: part[PAYLOAD].reset_index(drop=True)
                  for k, part in sub.groupby(TRIP_KEY, sort=False)}
        for key in repeats:
            date, trip, inst = key
            mine = by_key[key]
            for j in range(inst):
                other = by_key.get((date, trip, j))
                if other is not None and mine.equals(other):
                    out.loc[key, "R5"] = True
                    break
    out["first_order"] = first_order
    out = out.sort_values("first_order", kind="stable").drop(columns="first_order")
    out["valid"] = ~out[list(RULES)].any(axis=1)
    return out


@numba.njit(cache=True)
def _running_load(delta, starts):
    out = np.empty_like(delta)
    clamps = 0
    for i in range(delta.shape[0]):
        prev = 0 if starts[i] else out[i - 1]
        v = prev + delta[i]
        if v < 0:
            v = 0
            clamps += 1
        out[i] = v
    return out, clamps


def derive_load(frame: pd.DataFrame) -> Tuple[pd.DataFrame, int, int]:
    """Recompute load as the zero-clamped running sum of ons - offs per trip.

    Returns (frame sorted by trip and stop sequence, clamp events, null counts
    treated as zero).
    """
    keys = ["transit_date", "trip_id", "instance"] if "instance" in frame else ["transit_date", "trip_id"]
    df = frame.sort_values(keys + ["stop_sequence"], kind="stable").reset_index(drop=True)
    ons = df["ons"].astype("Float64")
    offs = df["offs"].astype("Float64")
    nulls = int(ons.isna().sum() + offs.isna().sum())
    delta = (ons.fillna(0) - offs.fillna(0)).to_numpy(dtype=np.int64)
    codes = df.groupby(keys, sort=False).ngroup().to_numpy()
    starts = np.r_[True, codes[1:] != codes[:-1]] if len(codes) else np.zeros(0, dtype=bool)
    loads, clamps = _running_load(delta, starts)
    df["ons"] = ons.fillna(0).astype("Int64")
    df["offs"] = offs.fillna(0).astype("Int64")
    df["load"] = pd.array(loads, dtype="Int64")
    return df, int(clamps), nulls


def filter_trips(frame: pd.DataFrame, thresholds: CleanThresholds = CleanThresholds(),
                 derive: bool = True) -> Tuple[pd.DataFrame, CleanReport, pd.DataFrame]:
    """Drop every trip instance that breaks a rule.

    Returns (clean records, report, per-instance verdicts). With ``derive``
    the surviving loads are re-derived from ons/offs.
    """
    framed = add_instance(frame)
    verdicts = classify_frame(framed, thresholds)
    report = CleanReport(trips_in=len(verdicts))
    for r in RULES:
        report.rejected_by_rule[r] = int(verdicts[r].sum())
    good = verdicts.index[verdicts["valid"]]
    good_keys = pd.MultiIndex.from_frame(framed[TRIP_KEY]).isin(good)
    kept = framed.loc[good_keys]
    report.trips_out = int(verdicts["valid"].sum())
    if derive:
        kept, report.clamp_events, report.null_counts_filled = derive_load(kept)
    else:
        kept = kept.sort_values(TRIP_KEY + ["stop_sequence"], kind="stable").reset_index(drop=True)
    kept = kept.drop(columns="instance")
    kept["is_clean"] = True
    log.info("clean: %d/%d trips kept (%.1f%%), %d clamp events", report.trips_out, report.trips_in,
             100 * report.fraction_clean, report.clamp_events)
    return kept, report, verdicts


def invalid_trip_keys(verdicts: pd.DataFrame) -> set:
    """(transit_date, trip_id) pairs with at least one invalid instance."""
    bad = verdicts.index[~verdicts["valid"]]
    return {(pd.Timestamp(d), t) for d, t, _ in bad}
