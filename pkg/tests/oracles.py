"""Brute-force reference implementations used as test oracles.

Each one is written for clarity with plain Python loops and shares no code
with the package beyond input data.
"""

from __future__ import annotations

import math
from collections import defaultdict
from datetime import timedelta

TRIP_RANGES = [(0, 6), (7, 12), (13, 54), (55, 75), (76, math.inf)]
STOP_RANGES = [(0, 5), (6, 11), (12, 16), (17, 29), (30, math.inf)]


def bin_by_table(load, ranges):
    for level, (lo, hi) in enumerate(ranges):
        if lo <= load <= hi:
            return level
    raise ValueError(load)


def trip_max_loads(frame):
    """{(date, trip): max load} by a row loop."""
    best = {}
    for d, t, load in zip(frame["transit_date"], frame["trip_id"], frame["load"]):
        key = (d, t)
        v = int(load)
        if key not in best or v > best[key]:
            best[key] = v
    return best


def stop_sums(frame, width):
    """{(date, route, direction, stop, window): summed load} by a row loop."""
    sums = defaultdict(int)
    for d, r, di, s, ts, load in zip(frame["transit_date"], frame["route_id"], frame["direction"],
                                    frame["stop_id"], frame["scheduled_arrival"], frame["load"]):
        window = (ts.hour * 60 + ts.minute) // width
        sums[(d, r, di, s, window)] += int(load)
    return dict(sums)


def walk_tree(tree, row):
    node = 0
    while tree["feature"][node] != -1:
        if row[tree["feature"][node]] <= tree["threshold"][node]:
            node = tree["left"][node]
        else:
            node = tree["right"][node]
    return tree["value"][node]


def ensemble_predict(model_dict, rows):
    """Evaluate a serialized GBT model row by row in Python floats."""
    out = []
    for row in rows:
        pred = model_dict["base_score"]
        for tree in model_dict["trees"]:
            pred = pred + model_dict["learning_rate"] * walk_tree(tree, [float(x) for x in row])
        out.append(pred)
    return out


def signed_error_histogram(pairs):
    hist = {e: 0 for e in range(-4, 5)}
    for t, p in pairs:
        hist[t - p] += 1
    return hist


def horizon_tally(truth, preds, abstain=-1):
    """{(horizon, |error| or 'abstain'): count} by nested loops."""
    counts = defaultdict(int)
    for trow, prow in zip(truth, preds):
        for h, (t, p) in enumerate(zip(trow, prow), start=1):
            if p == abstain:
                counts[(h, "abstain")] += 1
            else:
                counts[(h, abs(t - p))] += 1
    return dict(counts)


def lexicographic_order(rows, keys):
    """Row indices sorted by the given key columns with Python's tuple ordering."""
    tuples = [tuple(rows[k].iloc[i] for k in keys) for i in range(len(rows))]
    return sorted(range(len(rows)), key=lambda i: tuples[i])


def day_ahead_oracle(trips, row, p):
    """(pc_load, avg_load_p, n_used) for one trip row from same route/direction history."""
    t = trips["trip_start"].iloc[row]
    same = (trips["route_id"] == trips["route_id"].iloc[row]) & (trips["direction"] == trips["direction"].iloc[row])
    cands = []
    for j in range(len(trips)):
        if not same.iloc[j]:
            continue
        s, e = trips["trip_start"].iloc[j], trips["trip_end"].iloc[j]
        if e < t and s >= t - timedelta(hours=24):
            cands.append((e, s, j))
    cands.sort()
    used = [trips["max_load"].iloc[j] for _, _, j in cands[-p:]] if p else []
    if len(used) >= 2:
        a, b = float(used[-2]), float(used[-1])
        pc = max(-100.0, min(100.0, (b - a) / max(abs(a), 1e-6)))
    else:
        pc = math.nan
    avg = sum(used) / len(used) if used else math.nan
    return pc, avg, len(used)
