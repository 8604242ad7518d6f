"""K-fold grid search for a trip-level model on an existing fused dataset.

    python3 scripts/grid_search.py --config cfg.json --level trip-dayahead
"""

import argparse
import dataclasses

from tlf import pipeline as pl
from tlf.config import LEVELS, load_config
from tlf.io import read_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--level", choices=[lv for lv in LEVELS if lv != "stop"], default="trip-anyday")
    args = ap.parse_args()

    cfg = load_config(args.config)
    cfg = dataclasses.replace(cfg, gbt=dataclasses.replace(cfg.gbt, grid_search=True))
    paths = pl.train_trip(cfg, args.level)
    pl.evaluate_trip(cfg, args.level)
    print(read_csv(paths["cv"]).sort_values("mean_rmse").to_string(index=False))


if __name__ == "__main__":
    main()
