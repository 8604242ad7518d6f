"""Trip-level models across time-window widths.

    python3 scripts/sweep_windows.py --config cfg.json --out runs/windows --widths 15 30 60
"""

import argparse
import dataclasses
import json
from pathlib import Path

import pandas as pd

from tlf import pipeline as pl
from tlf.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--widths", type=int, nargs="+", default=[15, 30, 45, 60])
    args = ap.parse_args()

    base = load_config(args.config)
    rows = []
    for width in args.widths:
        cfg = dataclasses.replace(base, window_minutes=width, out=str(Path(args.out) / f"w{width}")).validate()
        pl.run_synth(cfg)
        pl.run_clean(cfg)
        pl.run_fuse(cfg)
        for level in ("trip-anyday", "trip-dayahead"):
            pl.train_trip(cfg, level)
            pl.evaluate_trip(cfg, level)
            rep = json.loads((Path(cfg.out) / "eval" / level / "report.json").read_text())
            for name, m in rep["models"].items():
                rows.append({"window_minutes": width, "level": level, "model": name,
                             "rmse_bins": m["rmse_bins"], "f1": m["low_high"]["f1"]})
    table = pd.DataFrame(rows)
    table.to_csv(Path(args.out) / "window_sweep.csv", index=False, float_format="%.6f")
    print(table.to_string(index=False))


if __name__ == "__main__":
    main()
