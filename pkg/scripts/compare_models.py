"""Correct/mistake ratios of the main model against each baseline, per level.

    python3 scripts/compare_models.py --out out
"""

import argparse
import json
from pathlib import Path


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out")
    args = ap.parse_args()
    for rep_path in sorted(Path(args.out, "eval").glob("*/report.json")):
        rep = json.loads(rep_path.read_text())
        models = rep["models"]
        main_name = "seq2seq" if "seq2seq" in models else "gbt"
        main_m = models[main_name]
        print(f"[{rep_path.parent.name}]")
        for name, m in models.items():
            if name == main_name:
                continue
            c0, c1 = main_m["abs_error_buckets"]["0"], m["abs_error_buckets"]["0"]
            w0, w1 = main_m["evaluated"] - c0, m["evaluated"] - c1
            correct = f"{c0 / c1:.3f}" if c1 else "n/a"
            mistakes = f"{w0 / w1:.3f}" if w1 else "n/a"
            print(f"  {main_name} vs {name}: correct x{correct}  mistakes x{mistakes}  "
                  f"rmse {main_m['rmse_bins']:.3f} vs {m['rmse_bins']:.3f}  "
                  f"abstained {m['abstained']}")


if __name__ == "__main__":
    main()
