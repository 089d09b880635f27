"""Command-line entry point: ``ihr {run,sweep,ablate,report}``.

Exit codes: 0 success, 2 usage or config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ihr.config import ExperimentConfig, load_config, resolve_output_dir
from ihr.errors import InvalidConfig
from ihr.harness import RunReport, ablation_ladder, run_continual, tau_sweep, train_first_task
from ihr.merge import MergeConfig
from ihr.stats import wilcoxon_signed_rank
from ihr.tasks import make_stream

log = logging.getLogger("ihr")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MEMORY_FREE = ("FineTune", "FTA", "IHR")


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _strategy_cfg(cfg: ExperimentConfig, name):
    if name == "IHR":
        return cfg.merge
    return MergeConfig(strategy=name)


def _one_run(cfg: ExperimentConfig, name, seed, theta1=None):
    stream = make_stream(cfg.stream_for(seed))
    mem = cfg.memory_size if name == "ER" else None
    return run_continual(stream, _strategy_cfg(cfg, name), cfg.trainer, theta1=theta1, memory_size=mem)


def _run_matrix(cfg: ExperimentConfig, jobs):
    """All (strategy, seed) runs, returned in a fixed order regardless of ``jobs``."""
    keys = [(name, seed) for seed in cfg.seeds for name in cfg.strategies]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_one_run, cfg, name, seed) for name, seed in keys]
            return [(k, f.result()) for k, f in zip(keys, futs)]
    out, theta1 = [], {}
    for name, seed in keys:
        if seed not in theta1:
            theta1[seed] = train_first_task(make_stream(cfg.stream_for(seed)), cfg.trainer)
        out.append(((name, seed), _one_run(cfg, name, seed, theta1[seed])))
    return out


def summary_table(reports: dict[str, list[RunReport]]):
    """Per-task final error, Average and BWT, averaged over seeds.

    ``*`` marks the best and ``+`` the second best memory-free strategy per column.
    """
    names = list(reports)
    T = len(reports[names[0]][0].final_errors)
    cols = [f"task{j + 1}" for j in range(T)] + ["Average", "BWT"]
    vals = {}
    for n in names:
        fe = np.mean([r.final_errors for r in reports[n]], axis=0)
        vals[n] = list(fe) + [np.mean([r.avg_error for r in reports[n]]), np.mean([r.bwt for r in reports[n]])]
    marks = {n: [" "] * len(cols) for n in names}
    free = [n for n in names if n in MEMORY_FREE]
    for c in range(len(cols)):
        higher_better = cols[c] == "BWT"
        ranked = sorted(free, key=lambda n: -vals[n][c] if higher_better else vals[n][c])
        for sym, n in zip("*+", ranked):
            marks[n][c] = sym
    width = max(10, max(len(n) for n in names) + 2)
    lines = [f"{'Method':<{width}}" + "".join(f"{c:>10}" for c in cols)]
    for n in names:
        cells = []
        for c, v in enumerate(vals[n]):
            s = f"{v:+.4f}" if cols[c] == "BWT" else f"{v:.4f}"
            cells.append(f"{s + marks[n][c]:>10}")
        lines.append(f"{n:<{width}}" + "".join(cells))
    return "\n".join(lines)


def cmd_run(cfg: ExperimentConfig, out: Path, jobs=1):
    results = _run_matrix(cfg, jobs)
    rows, by_strategy = [], {}
    for (name, seed), rep in results:
        write_atomic(out / "runs" / f"{name}_seed{seed}.json", _dumps(rep.to_dict()))
        by_strategy.setdefault(name, []).append(rep)
        for j, e in enumerate(rep.final_errors):
            rows.append([name, seed, j + 1, "final_error", repr(e)])
        for i, row in enumerate(rep.R):
            for j, e in enumerate(row):
                rows.append([name, seed, j + 1, f"R{i + 1}", repr(e)])
        rows.append([name, seed, "all", "avg_error", repr(rep.avg_error)])
        rows.append([name, seed, "all", "bwt", repr(rep.bwt)])
    write_atomic(out / "results.csv", _csv_text(["strategy", "seed", "task", "metric", "value"], rows))
    write_atomic(out / "config.json", _dumps(cfg.to_dict()))
    table = summary_table(by_strategy)
    write_atomic(out / "summary.txt", table + "\n")
    print(table)
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out: Path):
    taus = list(cfg.sweep_taus)
    if any(t <= 0 for t in taus):
        raise InvalidConfig("sweep.taus must all be positive")
    if taus != sorted(taus):
        raise InvalidConfig("sweep.taus must be sorted")
    per_seed = []
    for seed in cfg.seeds:
        res = tau_sweep(make_stream(cfg.stream_for(seed)), taus, cfg.trainer, with_ihr=True, merge_cfg=cfg.merge)
        log.info("sweep seed=%d arm=IHR tuned_hash=%s", seed, res.tuned_hash)
        log.info("sweep seed=%d arm=NoIHR tuned_hash=%s", seed, res.tuned_hash)
        per_seed.append(res)
    rows = []
    for i, r0 in enumerate(per_seed[0].rows):
        for task, key in (("task1", "task1_error"), ("task2", "task2_error"), ("average", "average")):
            v = float(np.mean([res.rows[i][key] for res in per_seed]))
            rows.append([repr(r0["tau"]), r0["arm"], task, repr(v)])
    write_atomic(out / "sweep.csv", _csv_text(["tau", "arm", "task", "error"], rows))
    print(f"{'tau':>6} {'arm':>6} {'task1':>8} {'task2':>8} {'average':>8}")
    for i in range(0, len(rows), 3):
        print(f"{float(rows[i][0]):>6.2f} {rows[i][1]:>6} " + " ".join(f"{float(r[3]):>8.4f}" for r in rows[i : i + 3]))
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, out: Path):
    if cfg.stream.num_tasks < 3:
        raise InvalidConfig("stream.num_tasks must be >= 3 for the ablation (factor_sum equals last_task at T=2)")
    per_row: dict[str, list] = {}
    for seed in cfg.seeds:
        ladder = ablation_ladder(make_stream(cfg.stream_for(seed)), cfg.trainer, cfg.merge)
        for entry in ladder:
            log.info("ablation row=%r seed=%d theta1_hash=%s", entry["row"], seed, entry["report"].param_hashes[0])
            per_row.setdefault(entry["row"], []).append(entry)
    rows = []
    lines = [f"{'Method':<34}{'Average':>10}{'BWT':>10}"]
    for label, entries in per_row.items():
        avg = float(np.mean([e["avg_error"] for e in entries]))
        bwt = float(np.mean([e["bwt"] for e in entries]))
        lines.append(f"{label:<34}{avg:>10.4f}{bwt:>+10.4f}")
        for seed, e in zip(cfg.seeds, entries):
            rows.append([label, seed, repr(e["avg_error"]), repr(e["bwt"])])
    write_atomic(out / "ablation.csv", _csv_text(["row", "seed", "avg_error", "bwt"], rows))
    print("\n".join(lines))
    return EXIT_OK


def load_reports(out: Path):
    reports: dict[str, list[RunReport]] = {}
    files = sorted((out / "runs").glob("*.json"))
    if not files:
        raise InvalidConfig(f"no run reports under {out / 'runs'}")
    for f in files:
        rep = RunReport.from_dict(json.loads(f.read_text()))
        reports.setdefault(rep.strategy, []).append(rep)
    for reps in reports.values():
        reps.sort(key=lambda r: r.root_seed)
    return reports


def cmd_report(out: Path, pairs):
    reports = load_reports(out)
    print(summary_table(reports))
    for pair in pairs:
        a, _, b = pair.partition(":")
        if a not in reports or b not in reports:
            raise InvalidConfig(f"pair {pair!r} names a strategy without reports")
        ra = {r.root_seed: r for r in reports[a]}
        rb = {r.root_seed: r for r in reports[b]}
        seeds = sorted(set(ra) & set(rb))
        la = np.concatenate([np.concatenate(ra[s].final_losses) for s in seeds])
        lb = np.concatenate([np.concatenate(rb[s].final_losses) for s in seeds])
        p = wilcoxon_signed_rank(la, lb)
        direction = "lower" if np.median(la - lb) < 0 else "higher"
        print(f"{a} vs {b}: n={len(la)} p={p:.3g} ({a} median loss {direction})")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="ihr", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--out", type=Path, help="output directory (default: $IHR_OUTPUT_DIR, config, ./results)")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--seed", type=int, help="run a single root seed instead of the configured list")
    common.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="strategy x seed matrix, Table-1 style summary")
    sub.add_parser("sweep", parents=[common], help="tau sweep on the first adaptation")
    sub.add_parser("ablate", parents=[common], help="four-row ablation ladder")
    rep = sub.add_parser("report", parents=[common], help="summarize saved runs and test strategy pairs")
    rep.add_argument("--pair", action="append", default=[], metavar="A:B")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.jobs < 1:
            raise InvalidConfig("--jobs must be >= 1")
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seeds=[{args.seed}]")
        cfg = load_config(args.config, overrides)
        out = resolve_output_dir(args.out, cfg)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    phase = args.command
    try:
        if args.command == "run":
            return cmd_run(cfg, out, args.jobs)
        if args.command == "sweep":
            return cmd_sweep(cfg, out)
        if args.command == "ablate":
            return cmd_ablate(cfg, out)
        return cmd_report(out, args.pair)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure inside a phase maps to exit 3
        print(f"runtime failure in {phase}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
