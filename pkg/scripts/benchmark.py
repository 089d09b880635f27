"""Strategy table, tau sweep and ablation ladder on one config, plus paired Wilcoxon tests.

    python scripts/benchmark.py --config configs/default.yaml --out results/default
"""

import argparse
import sys

from ihr.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.yaml")
    ap.add_argument("--out", default="results/default")
    ap.add_argument("--jobs", default="1")
    args = ap.parse_args()
    common = ["--config", args.config, "--out", args.out, "--quiet"]
    steps = [
        ["run", *common, "--jobs", args.jobs],
        ["report", *common, "--pair", "IHR:FineTune", "--pair", "IHR:FTA", "--pair", "IHR:ER"],
        ["sweep", *common],
        ["ablate", *common],
    ]
    for argv in steps:
        print(f"\n$ ihr {' '.join(argv)}", flush=True)
        code = cli(argv)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
