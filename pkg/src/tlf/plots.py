"""Deterministic SVG figures (fixed hash salt, no timestamp metadata)."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Mapping, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from tlf.domain import Level  # noqa: E402
from tlf.io import PROVENANCE_PREFIX, canonical_json  # noqa: E402

LABELS = [lvl.label for lvl in Level]


def _save(fig, path, provenance: Optional[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    with plt.rc_context({"svg.hashsalt": "tlf", "svg.fonttype": "path"}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    text = buf.getvalue()
    if provenance is not None:
        # provenance comment goes first so read_provenance finds it on line one
        text = "<!-- " + PROVENANCE_PREFIX.strip() + " " + canonical_json(provenance) + " -->\n" + text
    path.write_text(text)
    return path


def error_histogram(buckets: Mapping[str, pd.Series], path, title: str = "",
                    provenance: Optional[dict] = None) -> Path:
    """Grouped bars of |error| counts (0..4) per model."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = list(buckets)
    width = 0.8 / max(len(names), 1)
    x = np.arange(5)
    for i, name in enumerate(names):
        ax.bar(x + i * width, [int(buckets[name].get(k, 0)) for k in range(5)], width, label=name)
    ax.set_xticks(x + width * (len(names) - 1) / 2, [str(k) for k in range(5)])
    ax.set_xlabel("|y_error|")
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path, provenance)


def rmse_by_window(tables: Mapping[str, pd.DataFrame], path, window_minutes: int, title: str = "",
                   provenance: Optional[dict] = None) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for name, t in tables.items():
        hours = t["time_window"].to_numpy() * window_minutes / 60.0
        ax.plot(hours, t["rmse"].to_numpy(), marker=".", label=name)
    ax.set_xlabel("hour of day (window start)")
    ax.set_ylabel("RMSE (bins)")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path, provenance)


def confusion_heatmap(matrix: np.ndarray, path, title: str = "",
                      provenance: Optional[dict] = None) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(matrix, cmap="Blues")
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, str(int(matrix[i, j])), ha="center", va="center", fontsize=7)
    ax.set_xticks(range(5), LABELS, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(5), LABELS, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path, provenance)


def horizon_errors(table: pd.DataFrame, path, title: str = "",
                   provenance: Optional[dict] = None) -> Path:
    """Non-zero error counts per future stop for each model."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    wrong = table[(table["abs_error"] != "abstain") & (table["abs_error"] != 0)]
    for name, part in wrong.groupby("model", sort=False):
        per = part.groupby("horizon")["count"].sum()
        ax.plot(per.index.to_numpy(), per.to_numpy(), marker="o", label=name)
    ax.set_xlabel("stops ahead")
    ax.set_ylabel("errors")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path, provenance)
