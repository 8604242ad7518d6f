"""Metrics and report tables: ordinal errors, RMSE by window, low/high P/R/F1,
confusion matrices, per-horizon and per-month error counts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from tlf.baselines import ABSTAIN
from tlf.domain import N_BINS, low_high_levels

ERRORS = list(range(-(N_BINS - 1), N_BINS))


def _pairs(y_true, y_pred):
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError("y_true and y_pred differ in length")
    keep = p != ABSTAIN
    return t[keep], p[keep], int((~keep).sum())


def ordinal_errors(y_true, y_pred) -> pd.Series:
    """Count per signed error y_true - y_pred in -4..4 (abstentions dropped)."""
    t, p, _ = _pairs(y_true, y_pred)
    counts = np.bincount(t - p + N_BINS - 1, minlength=2 * N_BINS - 1)
    return pd.Series(counts, index=pd.Index(ERRORS, name="y_error"), name="count")


def abs_error_buckets(hist: pd.Series) -> pd.Series:
    """Fold a signed histogram into |error| buckets 0..4."""
    out = {k: int(hist.get(k, 0) + (hist.get(-k, 0) if k else 0)) for k in range(N_BINS)}
    return pd.Series(out, name="count").rename_axis("abs_error")


def rmse(y_true, y_pred) -> float:
    t, p, _ = _pairs(y_true, y_pred)
    if not len(t):
        return float("nan")
    d = (t - p).astype(float)
    return float(np.sqrt(np.mean(d * d)))


def rmse_by_window(y_true, y_pred, windows) -> pd.DataFrame:
    """Per-window RMSE over bin indices; windows without samples are absent."""
    t = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    w = np.asarray(windows)
    keep = p != ABSTAIN
    df = pd.DataFrame({"time_window": w[keep], "sq": (t[keep] - p[keep]) ** 2})
    g = df.groupby("time_window", sort=True)["sq"]
    out = pd.DataFrame({"n": g.size(), "rmse": np.sqrt(g.mean())}).reset_index()
    return out


def rmse_raw_by_window(true_load, pred_load, windows) -> pd.DataFrame:
    df = pd.DataFrame({"time_window": np.asarray(windows),
                       "sq": (np.asarray(true_load, float) - np.asarray(pred_load, float)) ** 2})
    g = df.groupby("time_window", sort=True)["sq"]
    return pd.DataFrame({"n": g.size(), "rmse": np.sqrt(g.mean())}).reset_index()


def low_high_metrics(y_true, y_pred) -> Dict[str, float]:
    """Precision/recall/F1 with High as the positive class, on bin levels.

    An undefined precision or recall (no predicted / no actual positives) is
    reported as 0 with a flag.
    """
    t, p, abstained = _pairs(y_true, y_pred)
    ht = low_high_levels(t).astype(bool)
    hp = low_high_levels(p).astype(bool)
    tp = int((ht & hp).sum())
    fp = int((~ht & hp).sum())
    fn = int((ht & ~hp).sum())
    tn = int((~ht & ~hp).sum())
    p_undef = tp + fp == 0
    r_undef = tp + fn == 0
    precision = 0.0 if p_undef else tp / (tp + fp)
    recall = 0.0 if r_undef else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1, "tp": tp, "fp": fp, "fn": fn, "tn": tn,
            "precision_undefined": p_undef, "recall_undefined": r_undef, "n": len(t),
            "abstained": abstained}


def confusion(y_true, y_pred) -> np.ndarray:
    """5x5 counts; rows are true bins, columns predicted bins."""
    t, p, _ = _pairs(y_true, y_pred)
    m = np.zeros((N_BINS, N_BINS), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def monthly_consistency(y_true, y_pred, dates) -> pd.DataFrame:
    """Per-month counts of |error| 0..4 (abstentions dropped)."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    keep = p != ABSTAIN
    month = pd.to_datetime(pd.Series(dates)).dt.strftime("%Y-%m").to_numpy()[keep]
    err = np.abs(t[keep] - p[keep])
    df = pd.crosstab(pd.Series(month, name="month"), pd.Series(err, name="abs_error"))
    df = df.reindex(columns=range(N_BINS), fill_value=0)
    df.columns = [f"abs_error_{c}" for c in df.columns]
    return df.reset_index()


def horizon_error_counts(truth: np.ndarray, predictions: Mapping[str, np.ndarray]) -> pd.DataFrame:
    """Long table (model, horizon, abs_error, count) plus abstentions per horizon.

    ``truth`` is (trips, H) true bins; each prediction array has the same shape
    with ``ABSTAIN`` where a model declined.
    """
    truth = np.asarray(truth, dtype=np.int64)
    rows = []
    for name, pred in predictions.items():
        pred = np.asarray(pred, dtype=np.int64)
        if pred.shape != truth.shape:
            raise ValueError(f"{name}: prediction shape {pred.shape} != truth shape {truth.shape}")
        for h in range(truth.shape[1]):
            keep = pred[:, h] != ABSTAIN
            err = np.abs(truth[keep, h] - pred[keep, h])
            counts = np.bincount(err, minlength=N_BINS)
            for e in range(N_BINS):
                rows.append({"model": name, "horizon": h + 1, "abs_error": e, "count": int(counts[e])})
            rows.append({"model": name, "horizon": h + 1, "abs_error": "abstain",
                         "count": int((~keep).sum())})
    return pd.DataFrame(rows)


@dataclass
class EvalReport:
    """Metric bundle for one model on one evaluation set."""

    name: str
    histogram: pd.Series
    low_high: Dict[str, float]
    confusion: np.ndarray
    rmse: float
    rmse_by_window: pd.DataFrame
    monthly: pd.DataFrame
    evaluated: int
    abstained: int
    extra: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def build(cls, name: str, y_true, y_pred, windows, dates, extra=None) -> "EvalReport":
        t, p, abstained = _pairs(y_true, y_pred)
        return cls(name, ordinal_errors(y_true, y_pred), low_high_metrics(y_true, y_pred),
                   confusion(y_true, y_pred), rmse(y_true, y_pred),
                   rmse_by_window(y_true, y_pred, windows), monthly_consistency(y_true, y_pred, dates),
                   len(t), abstained, dict(extra or {}))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "evaluated": self.evaluated,
            "abstained": self.abstained,
            "error_histogram": {str(k): int(v) for k, v in self.histogram.items()},
            "abs_error_buckets": {str(k): int(v) for k, v in abs_error_buckets(self.histogram).items()},
            "low_high": self.low_high,
            "confusion": self.confusion.tolist(),
            "rmse_bins": self.rmse,
            "rmse_by_window": [{"time_window": int(r.time_window), "n": int(r.n), "rmse": float(r.rmse)}
                               for r in self.rmse_by_window.itertuples()],
            "monthly": self.monthly.to_dict(orient="records"),
            **self.extra,
        }


def correct_ratio(a: EvalReport, b: EvalReport) -> Optional[float]:
    """Error-0 count of ``a`` relative to ``b`` (e.g. 1.4 means 40% more correct predictions)."""
    denom = int(b.histogram.get(0, 0))
    return None if denom == 0 else int(a.histogram.get(0, 0)) / denom


def mistake_ratio(a: EvalReport, b: EvalReport) -> Optional[float]:
    wrong = lambda r: int(r.histogram.sum() - r.histogram.get(0, 0))  # noqa: E731
    return None if wrong(b) == 0 else wrong(a) / wrong(b)
