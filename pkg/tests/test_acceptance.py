"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints at the end
of the session. Benchmark comparisons use the default stream, trainer and merge
settings over root seeds 0-4 and pass when at least 4 of 5 seeds agree.
"""

import time

import numpy as np
import pytest
import yaml
from conftest import NORM_CONTRACT, record

from ihr.cli import main
from ihr.curvature import KronFactors, dense_block, ihvp, read_header_shapes
from ihr.harness import (
    FACTOR_FILE,
    TrainerConfig,
    ablation_ladder,
    run_continual,
    tau_sweep,
    train_first_task,
)
from ihr.linalg import sym_solve, unvec, vec
from ihr.merge import MergeConfig, merge_fta, merge_ihr
from ihr.model import backward, forward, init_params, loss, loss_grad
from ihr.stats import wilcoxon_exact, wilcoxon_normal, wilcoxon_signed_rank
from ihr.tasks import evaluate, make_stream

SEEDS = (0, 1, 2, 3, 4)
MAJORITY = 4
SWEEP_GRID = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0)


def votes(flags):
    return sum(bool(f) for f in flags)


@pytest.fixture(scope="module")
def benchmark():
    """Ablation ladder plus FTA per seed on the default benchmark.

    Ladder row 1 is plain fine-tuning and row 4 is default IHR, so those runs
    double as the FineTune and IHR entries of the strategy comparison.
    """
    trainer = TrainerConfig()
    out = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        stream = make_stream(root_seed=seed)
        theta1 = train_first_task(stream, trainer)
        ladder = ablation_ladder(stream, trainer, MergeConfig(), theta1=theta1)
        fta = run_continual(stream, MergeConfig("FTA"), trainer, theta1=theta1)
        out[seed] = {"ladder": ladder, "ft": ladder[0]["report"], "ihr": ladder[3]["report"], "fta": fta}
    out["elapsed"] = time.perf_counter() - t0
    return out


def test_c01_kronecker_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        d_i, d_o = rng.integers(2, 9, size=2)
        B, C = rng.standard_normal((d_i, d_i)), rng.standard_normal((d_o, d_o))
        f = KronFactors([B @ B.T / d_i], [C @ C.T / d_o], 1, [float(rng.uniform(0.01, 1.0))], "00" * 32)
        delta = rng.standard_normal((d_o, d_i))
        dense = unvec(sym_solve(dense_block(f, 0), vec(delta)), delta.shape)
        worst = max(worst, float(np.max(np.abs(ihvp(f, 0, delta) - dense))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 10
    record(1, ok, f"max abs error {worst:.2e} over 50 layers, {elapsed:.2f}s")
    assert ok


def test_c02_norm_contract():
    # a fresh batch of merges here; the conftest wrapper has been checking
    # every merge_ihr call in the session, including this one
    rng = np.random.default_rng(202)
    stream = make_stream(root_seed=9, n_train=300, n_val=50, n_test=100)
    fast = TrainerConfig(epochs_first=5, epochs_later=2)
    for tau in (0.25, 1.0, 3.0):
        run_continual(stream, MergeConfig(tau=tau), fast)
    for _ in range(20):
        prev = init_params([6, 5, 3], rng)
        tuned = prev.unflatten(prev.flatten() + rng.standard_normal(prev.num_params()))
        f = KronFactors(
            [np.cov(rng.standard_normal((6, 40))), np.cov(rng.standard_normal((5, 40)))],
            [np.cov(rng.standard_normal((5, 40))), np.cov(rng.standard_normal((3, 40)))],
            40,
            [1e-3, 1e-3],
            prev.digest(),
        )
        merge_ihr(prev, tuned, f, MergeConfig(tau=float(rng.uniform(0.1, 5))), t=int(rng.integers(2, 6)))
    ok = NORM_CONTRACT["calls"] > 0 and NORM_CONTRACT["worst"] <= 1e-10
    record(
        2,
        ok,
        f"{NORM_CONTRACT['calls']} merges / {NORM_CONTRACT['layers']} layers checked so far this session, worst gap {NORM_CONTRACT['worst']:.2e}",
    )
    assert ok


def test_c03_gradient_fidelity():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(20):
        depth = int(rng.integers(1, 4))
        sizes = [int(x) for x in rng.integers(2, 7, size=depth + 1)]
        p = init_params(sizes, rng)
        n = int(rng.integers(1, 6))
        X = rng.standard_normal((n, sizes[0]))
        y = rng.integers(0, sizes[-1], n)
        logits, cache = forward(p, X)
        grad, _ = backward(p, cache, loss_grad(logits, y))
        flat, g = p.flatten(), grad.flatten()
        for i in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[i] += 1e-5
            dn[i] -= 1e-5
            fu = loss(forward(p.unflatten(up), X)[0], y)[1]
            fd = loss(forward(p.unflatten(dn), X)[0], y)[1]
            num = (fu - fd) / 2e-5
            worst = max(worst, abs(num - g[i]) / max(1.0, abs(num), abs(g[i])))
    ok = worst <= 1e-4
    record(3, ok, f"max relative error {worst:.2e} over 20 nets")
    assert ok


def test_c04_reductions():
    rng = np.random.default_rng(404)
    prev = init_params([5, 7, 3], rng)
    tuned = prev.unflatten(prev.flatten() + 0.3 * rng.standard_normal(prev.num_params()))
    ident = KronFactors.identity(prev.shapes, prev.digest(), damping=0.0)
    a = merge_ihr(prev, tuned, ident, MergeConfig(tau=1.0, alpha_p_policy=1.0), t=2)
    gap_a = float(np.max(np.abs(a.flatten() - tuned.flatten())))
    f = KronFactors([np.eye(5) * 2, np.eye(7) * 3], [np.eye(7), np.eye(3) * 0.5], 1, [0.1, 0.1], prev.digest())
    b = merge_ihr(prev, tuned, f, MergeConfig(tau=0.0), t=3)
    frozen = all(np.array_equal(w0, wb) for w0, wb in zip(prev.weights, b.weights))
    c = merge_fta(prev, tuned, 2)
    mid = np.array_equal(c.flatten(), prev.flatten() + 0.5 * (tuned.flatten() - prev.flatten()))
    ok = gap_a <= 1e-10 and frozen and mid
    record(4, ok, f"(a) identity gap {gap_a:.1e}; (b) tau=0 frozen={frozen}; (c) FTA midpoint={mid}")
    assert ok


def test_c05_forgetting_ordering(benchmark):
    rows = []
    for seed in SEEDS:
        r = benchmark[seed]
        ft, fta, ihr = r["ft"], r["fta"], r["ihr"]
        rows.append(
            (
                ihr.bwt > min(ft.bwt, fta.bwt),
                ihr.bwt > ft.bwt,
                ihr.avg_error < ft.avg_error,
                ihr.avg_error <= fta.avg_error,
            )
        )
    counts = [votes(col) for col in zip(*rows)]
    within = benchmark["elapsed"] < 15 * 60
    ok = all(c >= MAJORITY for c in counts) and within
    detail = ", ".join(
        f"{name} {c}/5"
        for name, c in zip(("bwt>worse(FT,FTA)", "bwt>FT", "avg<FT", "avg<=FTA"), counts)
    )
    means = {k: np.mean([benchmark[s][k].avg_error for s in SEEDS]) for k in ("ft", "fta", "ihr")}
    bwts = {k: np.mean([benchmark[s][k].bwt for s in SEEDS]) for k in ("ft", "fta", "ihr")}
    detail += (
        f"; mean avg FT {means['ft']:.4f} FTA {means['fta']:.4f} IHR {means['ihr']:.4f}"
        f"; mean bwt FT {bwts['ft']:+.4f} FTA {bwts['fta']:+.4f} IHR {bwts['ihr']:+.4f}"
        f"; {benchmark['elapsed']:.0f}s"
    )
    record(5, ok, detail)
    assert ok


def test_c06_adaptability(benchmark):
    wins = votes(benchmark[s]["ihr"].final_errors[-1] < benchmark[s]["fta"].final_errors[-1] for s in SEEDS)
    last = [(benchmark[s]["ihr"].final_errors[-1], benchmark[s]["fta"].final_errors[-1]) for s in SEEDS]
    ok = wins >= MAJORITY
    record(6, ok, f"IHR final-task error < FTA in {wins}/5 seeds " + "(IHR/FTA " + " ".join(f"{a:.3f}/{b:.3f}" for a, b in last) + ")")
    assert ok


def test_c07_tau_sweep():
    trainer = TrainerConfig()
    wins, exact = 0, True
    for seed in SEEDS:
        stream = make_stream(root_seed=seed)
        theta1 = train_first_task(stream, trainer)
        res = tau_sweep(stream, (0.0, *SWEEP_GRID), trainer, merge_cfg=MergeConfig(), theta1=theta1)
        e1 = tuple(evaluate(theta1, t.test)[0] for t in stream.prefix(2))
        for row in res.rows:
            if row["tau"] == 0.0:
                exact &= (row["task1_error"], row["task2_error"]) == e1
        top = max(SWEEP_GRID)
        ihr = next(r for r in res.rows if r["arm"] == "IHR" and r["tau"] == top)
        plain = next(r for r in res.rows if r["arm"] == "NoIHR" and r["tau"] == top)
        wins += ihr["task1_error"] <= plain["task1_error"]
    ok = wins >= MAJORITY and exact
    record(7, ok, f"old-task error at tau=5 with IHR <= without in {wins}/5 seeds; tau=0 equals theta^1: {exact}")
    assert ok


def test_c08_ablation_ladder(benchmark):
    ft_most, alpha_ok, near = 0, 0, 0
    gaps = []
    for seed in SEEDS:
        ladder = benchmark[seed]["ladder"]
        ft, fsum, last50, full = ladder
        ft_most += all(ft["bwt"] < e["bwt"] for e in ladder[1:])
        alpha_ok += full["bwt"] >= last50["bwt"]
        gap = ft["avg_error"] - full["avg_error"]
        diff = abs(fsum["avg_error"] - last50["avg_error"])
        near += diff <= 0.25 * gap
        gaps.append(f"{diff:.4f}/{gap:+.4f}")
    ok = ft_most >= MAJORITY and alpha_ok >= MAJORITY and near >= MAJORITY
    record(
        8,
        ok,
        f"FineTune most negative bwt {ft_most}/5, alpha_p=1/t bwt >= 0.50 {alpha_ok}/5, "
        f"|sum-last| <= 25% of FT->IHR gap {near}/5 (diff/gap: {' '.join(gaps)})",
    )
    assert ok


def test_c09_storage_constancy(tmp_path):
    trainer = TrainerConfig(epochs_first=5, epochs_later=2)
    sizes = {}
    for T in (2, 5):
        d = tmp_path / f"T{T}"
        d.mkdir()
        stream = make_stream(root_seed=0, num_tasks=T, angles_deg=(0, 25, 50, 75, 100)[:T], n_train=400)
        run_continual(stream, MergeConfig(), trainer, factor_dir=d)
        files = [p.name for p in d.iterdir()]
        assert files == [FACTOR_FILE], files
        path = d / FACTOR_FILE
        sizes[T] = (path.stat().st_size, read_header_shapes(path))
    ok = sizes[2] == sizes[5]
    record(9, ok, f"one file after T=5; size {sizes[5][0]} B, shapes {sizes[5][1]} (T=2: {sizes[2][0]} B)")
    assert ok


def test_c10_wilcoxon():
    rng = np.random.default_rng(1010)
    worst = 0.0
    for _ in range(100):
        a = rng.standard_normal(12)
        b = rng.standard_normal(12) + rng.uniform(-1.0, 1.0)
        worst = max(worst, abs(wilcoxon_normal(a, b) - wilcoxon_exact(a, b)))
    same = rng.standard_normal(20)
    p_same = wilcoxon_signed_rank(same, same.copy())
    ok = worst <= 0.02 and p_same == 1.0
    record(10, ok, f"max |normal - exact| {worst:.4f} over 100 cases at n=12; identical inputs p={p_same}")
    assert ok


def test_c11_determinism(tmp_path):
    cfg = {
        "stream": {"n_train": 300, "n_val": 50, "n_test": 100},
        "trainer": {"epochs_first": 5, "epochs_later": 2},
        "seeds": [0, 1],
        "er": {"memory_size": 50},
    }
    path = tmp_path / "det.yaml"
    path.write_text(yaml.safe_dump(cfg))
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert main(["run", "--config", str(path), "--out", str(o), "--quiet"]) == 0
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.suffix in (".csv", ".json"))
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    listing = sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*") if p.suffix in (".csv", ".json"))
    ok = same and files == listing and len(files) == 2 * 4 + 2
    record(11, ok, f"{len(files)} CSV/JSON files byte-identical across two runs: {same}")
    assert ok
