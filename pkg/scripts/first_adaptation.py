"""Old-task versus new-task error on the first adaptation as tau grows.

Prints, per root seed, both sweep arms side by side and the tau that
validation-based selection would pick for IHR.

    python scripts/first_adaptation.py --seeds 0 1 2 --taus 0.5 1 1.5 2 3
"""

import argparse
import logging

from ihr.harness import TrainerConfig, select_tau, tau_sweep, train_first_task
from ihr.merge import MergeConfig
from ihr.tasks import make_stream


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--taus", type=float, nargs="+", default=[0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0])
    ap.add_argument("--damping-scale", type=float, default=MergeConfig().damping_scale)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    trainer = TrainerConfig()
    cfg = MergeConfig(damping_scale=args.damping_scale)
    taus = sorted(args.taus)
    for seed in args.seeds:
        stream = make_stream(root_seed=seed)
        theta1 = train_first_task(stream, trainer)
        res = tau_sweep(stream, taus, trainer, merge_cfg=cfg, theta1=theta1)
        pick = select_tau(stream, taus, trainer, cfg, theta1=theta1)
        print(f"seed {seed}: theta^1 errors {res.theta1_errors[0]:.3f}/{res.theta1_errors[1]:.3f}, selected tau {pick:g}")
        print(f"{'tau':>6} {'IHR old':>8} {'IHR new':>8} {'plain old':>10} {'plain new':>10}")
        rows = {(r["arm"], r["tau"]): r for r in res.rows}
        for tau in taus:
            a, b = rows[("IHR", tau)], rows[("NoIHR", tau)]
            print(f"{tau:>6g} {a['task1_error']:>8.3f} {a['task2_error']:>8.3f} {b['task1_error']:>10.3f} {b['task2_error']:>10.3f}")


if __name__ == "__main__":
    main()
