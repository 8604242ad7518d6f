"""Command-line entry point: ``tlf <command> --config PATH [flags]``."""

from __future__ import annotations

import os

# Keep BLAS single-threaded so numeric results never depend on --threads.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import List, Optional  # noqa: E402

COMMANDS = ("synth", "ingest", "clean", "fuse", "train", "predict", "evaluate", "report", "all")


def build_parser() -> argparse.ArgumentParser:
    from tlf.config import LEVELS

    parser = argparse.ArgumentParser(prog="tlf", description="Transit load forecasting pipeline")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON config file ({} for all defaults)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads (results do not depend on this)")
    parser.add_argument("--window-minutes", type=int, help="trip time-window width")
    parser.add_argument("--level", choices=LEVELS, help="model level for train/predict/evaluate")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--model", help="model file for predict (default: the trained model in --out)")
    parser.add_argument("--query", help="query CSV for predict (trips.csv or stops.csv layout)")
    parser.add_argument("--predictions", help="output CSV for predict")
    parser.add_argument("--no-baselines", action="store_true", help="evaluate the model only")
    return parser


def _setup_logging():
    level = os.environ.get("TLF_LOG", "INFO").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def resolve_config(args):
    from tlf.config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.window_minutes is not None:
        cfg = dataclasses.replace(cfg, window_minutes=args.window_minutes)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out=args.out)
    return cfg.validate()


def run(args) -> None:
    from tlf import pipeline as pl

    cfg = resolve_config(args)
    cmd = args.command
    threads = max(1, args.threads)
    if cmd in ("train", "evaluate", "predict") and args.level is None:
        raise pl.StageError(f"`{cmd}` needs --level")
    if cmd == "synth":
        pl.run_synth(cfg, threads)
    elif cmd == "ingest":
        pl.run_ingest(cfg)
    elif cmd == "clean":
        pl.run_clean(cfg)
    elif cmd == "fuse":
        pl.run_fuse(cfg)
    elif cmd == "train":
        pl.train_stop(cfg) if args.level == "stop" else pl.train_trip(cfg, args.level)
    elif cmd == "evaluate":
        if args.level == "stop":
            pl.evaluate_stop(cfg, not args.no_baselines)
        else:
            pl.evaluate_trip(cfg, args.level, not args.no_baselines)
    elif cmd == "predict":
        lay = pl.Layout(cfg)
        model = Path(args.model) if args.model else lay.model_path(args.level)
        default_query = lay.fused / ("stops.csv" if args.level == "stop" else "trips.csv")
        query = Path(args.query) if args.query else default_query
        out = Path(args.predictions) if args.predictions else lay.root / f"predictions_{args.level}.csv"
        pl.run_predict(cfg, args.level, model, query, out)
    elif cmd == "report":
        path = pl.run_report(cfg)
        print(path.read_text())
    elif cmd == "all":
        pl.run_all(cfg, threads)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    from tlf.domain import ConfigError
    from tlf.ingest import IngestError
    from tlf.pipeline import StageError
    from tlf.gbt import ModelError

    try:
        run(args)
    except (ConfigError, IngestError, StageError, ModelError, FileNotFoundError) as exc:
        print(f"tlf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
