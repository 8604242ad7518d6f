"""Stop-level model for several numbers of past stops, on an existing fused dataset.

    python3 scripts/sweep_past_stops.py --config cfg.json --past 1 2 3 4 5
"""

import argparse
import dataclasses
from pathlib import Path

import numpy as np
import pandas as pd

from tlf import evaluation as ev
from tlf import pipeline as pl
from tlf import seq2seq as s2s
from tlf.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--past", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    args = ap.parse_args()

    base = load_config(args.config)
    rows = []
    for n in args.past:
        sc = dataclasses.replace(base.seq2seq, n_past=n)
        cfg = dataclasses.replace(base, seq2seq=sc)
        data = pl.stop_data(cfg, n)
        train_rows = data.rows[data.rows["transit_date"] <= data.boundaries.train_end]
        encoder = s2s.StopEncoder.fit(train_rows)
        rng = np.random.default_rng(cfg.seed)
        targets = data.samples["target"].to_numpy()
        tr = pl._cap(rng, targets[data.split == 0], sc.max_train_samples)
        va = pl._cap(rng, targets[data.split == 1], sc.max_val_samples)
        te = pl._cap(rng, targets[data.split == 2], sc.max_val_samples)
        result = s2s.train(*s2s.gather(data.rows, tr, n, encoder), sc,
                           val=s2s.gather(data.rows, va, n, encoder))
        enc, dec, y = s2s.gather(data.rows, te, n, encoder)
        pred = s2s.predict_bins(result.params, enc, dec)
        m = ev.low_high_metrics(y, pred)
        rows.append({"n_past": n, "best_epoch": result.best_epoch, "accuracy": float((pred == y).mean()),
                     "rmse_bins": ev.rmse(y, pred), "f1": m["f1"]})
        print(rows[-1])
    table = pd.DataFrame(rows)
    out = Path(base.out) / "past_stop_sweep.csv"
    table.to_csv(out, index=False, float_format="%.6f")
    print(table.to_string(index=False))


if __name__ == "__main__":
    main()
