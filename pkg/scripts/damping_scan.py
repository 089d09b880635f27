"""Scan the IHR damping scale on held-out root seeds.

For every scale, reports how often each qualitative comparison holds
(seeds 5 and up by default, so the acceptance seeds 0-4 stay untouched).

    python scripts/damping_scan.py --scales 0.001 0.1 1 3 --seeds 5-24
"""

import argparse
import logging

import numpy as np

from ihr.harness import TrainerConfig, ablation_ladder, run_continual, train_first_task
from ihr.merge import MergeConfig
from ihr.tasks import make_stream

CHECKS = (
    "bwt>worse(FT,FTA)",
    "bwt>FT",
    "avg<FT",
    "avg<=FTA",
    "last<FTA last",
    "FT most neg bwt",
    "1/t bwt>=0.50",
    "|sum-last|<=25% gap",
)


def seed_range(text):
    lo, _, hi = text.partition("-")
    return range(int(lo), int(hi or lo) + 1)


def checks(stream, trainer, merge_cfg):
    theta1 = train_first_task(stream, trainer)
    ft, fsum, last50, ihr = (e["report"] for e in ablation_ladder(stream, trainer, merge_cfg, theta1=theta1))
    fta = run_continual(stream, MergeConfig("FTA"), trainer, theta1=theta1)
    gap = ft.avg_error - ihr.avg_error
    return [
        ihr.bwt > min(ft.bwt, fta.bwt),
        ihr.bwt > ft.bwt,
        ihr.avg_error < ft.avg_error,
        ihr.avg_error <= fta.avg_error,
        ihr.final_errors[-1] < fta.final_errors[-1],
        ft.bwt < min(fsum.bwt, last50.bwt, ihr.bwt),
        ihr.bwt >= last50.bwt,
        abs(fsum.avg_error - last50.avg_error) <= 0.25 * gap,
    ], (ft.avg_error, ihr.avg_error, ft.bwt, ihr.bwt)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scales", type=float, nargs="+", default=[0.001, 0.1, 0.3, 1.0, 3.0])
    ap.add_argument("--seeds", type=seed_range, default=seed_range("5-24"))
    ap.add_argument("--tau", type=float, default=1.0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    trainer = TrainerConfig()
    print(f"{'scale':>8} " + " ".join(f"{c:>20}" for c in CHECKS) + f" {'avg FT/IHR':>15} {'bwt FT/IHR':>17}")
    for scale in args.scales:
        cfg = MergeConfig(tau=args.tau, damping_scale=scale)
        flags, stats = zip(*(checks(make_stream(root_seed=s), trainer, cfg) for s in args.seeds))
        rate = np.mean(flags, axis=0)
        m = np.mean(stats, axis=0)
        print(
            f"{scale:>8g} "
            + " ".join(f"{r:>20.2f}" for r in rate)
            + f" {m[0]:>7.4f}/{m[1]:.4f} {m[2]:>+8.4f}/{m[3]:+.4f}",
            flush=True,
        )


if __name__ == "__main__":
    main()
