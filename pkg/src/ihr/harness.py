"""Continual-learning runs: training, merging, evaluation and metric bookkeeping."""

from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ihr import curvature
from ihr.curvature import KronFactors
from ihr.errors import DivergedRun, InvalidConfig, NonFiniteLoss
from ihr.linalg import frobenius_norm
from ihr.merge import MergeConfig, merge, merge_ihr, step_along_update
from ihr.model import ParamSet, backward, forward, init_params, loss, loss_grad
from ihr.tasks import Split, TaskStream, evaluate

log = logging.getLogger(__name__)

FACTOR_FILE = "factors.kfac"


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_first: int = 40
    epochs_later: int = 10
    lr_divisor: float = 10.0
    batch_size: int = 32
    hidden: tuple = (32,)
    seed: int = 0
    loss: str = "cross_entropy"
    factor_batch_size: int = 256
    factor_max_examples: int | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidConfig("trainer.lr must be positive")
        if self.lr_divisor < 1:
            raise InvalidConfig("trainer.lr_divisor must be >= 1")
        if self.batch_size < 1 or self.epochs_first < 0 or self.epochs_later < 0:
            raise InvalidConfig("trainer batch size and epoch counts must be nonnegative")


class Adam:
    """Adam over the arrays of a ParamSet. Fresh state per task."""

    def __init__(self, params: ParamSet, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in _arrays(params)]
        self.v = [np.zeros_like(a) for a in _arrays(params)]
        self.k = 0

    def step(self, params: ParamSet, grads: ParamSet):
        self.k += 1
        c1 = 1.0 - self.b1**self.k
        c2 = 1.0 - self.b2**self.k
        for p, g, m, v in zip(_arrays(params), _arrays(grads), self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _arrays(params: ParamSet):
    return list(params.weights) + list(params.remaining.values())


class Reservoir:
    """Uniform reservoir sample of at most ``capacity`` examples (Algorithm R)."""

    def __init__(self, capacity, rng):
        if capacity < 1:
            raise InvalidConfig("memory_size must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self.X: list[np.ndarray] = []
        self.y: list[int] = []
        self.seen = 0

    def __len__(self):
        return len(self.y)

    def add(self, x, y):
        self.seen += 1
        if len(self.y) < self.capacity:
            self.X.append(x)
            self.y.append(int(y))
            return
        j = int(self.rng.integers(0, self.seen))
        if j < self.capacity:
            self.X[j] = x
            self.y[j] = int(y)

    def extend(self, split: Split):
        for x, y in zip(split.X, split.y):
            self.add(x, y)

    def as_split(self):
        return Split(np.array(self.X), np.array(self.y, dtype=np.int64))


def _rng(root_seed, trainer: TrainerConfig, *key):
    return np.random.default_rng(np.random.SeedSequence([root_seed, trainer.seed], spawn_key=key))


def train(params: ParamSet, split: Split, epochs, lr, trainer: TrainerConfig, rng, memory: Split | None = None):
    """Adam on ``split`` starting from a copy of ``params``.

    With a non-empty ``memory`` every batch is topped up with an equal number
    of examples drawn uniformly from it.
    """
    params = params.copy()
    opt = Adam(params, lr, trainer.beta1, trainer.beta2, trainer.eps)
    n = len(split)
    bs = trainer.batch_size
    use_mem = memory is not None and len(memory) > 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            xb, yb = split.X[idx], split.y[idx]
            if use_mem:
                midx = rng.integers(0, len(memory), size=len(idx))
                xb = np.concatenate([xb, memory.X[midx]])
                yb = np.concatenate([yb, memory.y[midx]])
            logits, cache = forward(params, xb)
            try:
                _, mean = loss(logits, yb, trainer.loss)
            except NonFiniteLoss as exc:
                raise DivergedRun(f"non-finite loss in epoch {epoch}") from exc
            grads, _ = backward(params, cache, loss_grad(logits, yb, trainer.loss))
            opt.step(params, grads)
            total += mean * len(idx)
        if not np.isfinite(total):
            raise DivergedRun(f"non-finite mean loss in epoch {epoch}")
    return params


def train_first_task(stream: TaskStream, trainer: TrainerConfig):
    """theta^1: fresh init trained on task 1. Shared by every strategy for a given seed."""
    root = stream.config.root_seed
    sizes = [stream.config.dim, *trainer.hidden, stream.config.num_classes]
    params = init_params(sizes, _rng(root, trainer, 0))
    return train(params, stream[0].train, trainer.epochs_first, trainer.lr, trainer, _rng(root, trainer, 1, 1))


def average_error(R):
    R = np.asarray(R)
    return float(np.mean(R[-1]))


def backward_transfer(R):
    """Mean of R[k][k] - R[T][k] over k < T; negative means forgetting."""
    R = np.asarray(R)
    T = R.shape[0]
    return float(np.mean([R[k, k] - R[T - 1, k] for k in range(T - 1)]))


@dataclass
class RunReport:
    strategy: str
    root_seed: int
    R: list[list[float]]
    avg_error: float
    bwt: float
    final_errors: list[float]
    final_losses: list[list[float]]
    merge_log: list[dict] = field(default_factory=list)
    param_hashes: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    linear_fraction: float = 1.0
    timings: dict = field(default_factory=dict)

    def to_dict(self):
        """JSON-ready dict. Wall-clock timings are left out so reruns are byte-identical."""
        d = asdict(self)
        d.pop("timings")
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _eval_row(params, stream):
    errs, losses = [], []
    for task in stream:
        e, per = evaluate(params, task.test)
        errs.append(e)
        losses.append(per)
    return errs, losses


def _layer_norms(prev: ParamSet, tuned: ParamSet, merged: ParamSet):
    return [
        {
            "layer": l,
            "raw_update_norm": frobenius_norm(w1 - w0),
            "merged_update_norm": frobenius_norm(wm - w0),
        }
        for l, (w0, w1, wm) in enumerate(zip(prev.weights, tuned.weights, merged.weights))
    ]


class FactorStore:
    """Curvature factors persisted between tasks.

    ``last_task`` keeps exactly one file, overwritten after every task.
    ``factor_sum`` keeps one file per task and averages them at merge time.
    """

    def __init__(self, directory: Path, source: str):
        self.dir = Path(directory)
        self.source = source
        self.count = 0

    def put(self, factors: KronFactors, t):
        name = FACTOR_FILE if self.source != "factor_sum" else f"factors_task{t}.kfac"
        curvature.save_factors(factors, self.dir / name)
        self.count = t

    def get(self, prev: ParamSet, damping=None):
        if self.source == "identity":
            return KronFactors.identity(prev.shapes, prev.digest(), 0.0 if damping is None else damping)
        if self.source == "factor_sum":
            hist = [curvature.load_factors(self.dir / f"factors_task{i}.kfac") for i in range(1, self.count + 1)]
            return curvature.merge_factor_sets(hist)
        return curvature.load_factors(self.dir / FACTOR_FILE)


def run_continual(
    stream: TaskStream,
    strategy: MergeConfig,
    trainer: TrainerConfig,
    theta1: ParamSet | None = None,
    factor_dir=None,
    memory_size=None,
):
    """Algorithm loop over the stream for one strategy.

    Task 1 is trained from scratch (or ``theta1`` is reused). Each later task
    is fine-tuned from theta^{t-1} with a reduced step size and fresh Adam
    state, merged, and, for IHR, curvature is re-estimated at the merged
    parameters on that task's training data. ``R[i][j]`` is filled for every
    ``j`` after each task ``i``.
    """
    T = len(stream)
    if T < 2:
        raise InvalidConfig("stream must contain at least 2 tasks")
    if strategy.strategy == "ER" and memory_size is None:
        raise InvalidConfig("ER needs a memory_size")
    root = stream.config.root_seed
    timings = {"train": 0.0, "merge": 0.0, "curvature": 0.0, "evaluate": 0.0}

    tmp = None
    if strategy.strategy == "IHR" and factor_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="ihr-factors-")
        factor_dir = tmp.name
    store = FactorStore(factor_dir, strategy.curvature_source) if strategy.strategy == "IHR" else None
    reservoir = Reservoir(memory_size, _rng(root, trainer, 3)) if strategy.strategy == "ER" else None

    def fit_curvature(params, t):
        if store is None or strategy.curvature_source == "identity":
            return
        t0 = time.perf_counter()
        f = curvature.estimate_factors(
            params,
            stream[t - 1],
            batch_size=trainer.factor_batch_size,
            max_examples=trainer.factor_max_examples,
            damping_scale=strategy.damping_scale,
            kind=trainer.loss,
        )
        store.put(f, t)
        timings["curvature"] += time.perf_counter() - t0

    try:
        t0 = time.perf_counter()
        theta = theta1.copy() if theta1 is not None else train_first_task(stream, trainer)
        timings["train"] += time.perf_counter() - t0
        hashes = [theta.digest()]
        fit_curvature(theta, 1)
        if reservoir is not None:
            reservoir.extend(stream[0].train)

        R, last_losses, merge_log = [], None, []
        t0 = time.perf_counter()
        row, last_losses = _eval_row(theta, stream)
        R.append(row)
        timings["evaluate"] += time.perf_counter() - t0

        for t in range(2, T + 1):
            task = stream[t - 1]
            t0 = time.perf_counter()
            memory = reservoir.as_split() if reservoir is not None else None
            tuned = train(
                theta,
                task.train,
                trainer.epochs_later,
                trainer.lr / trainer.lr_divisor,
                trainer,
                _rng(root, trainer, 1, t),
                memory=memory,
            )
            timings["train"] += time.perf_counter() - t0

            t0 = time.perf_counter()
            factors = store.get(theta, strategy.damping) if store is not None else None
            merged = merge(theta, tuned, strategy, t, factors)
            timings["merge"] += time.perf_counter() - t0
            merge_log.append({"task": t, "tau": strategy.tau, "layers": _layer_norms(theta, tuned, merged)})

            theta = merged
            hashes.append(theta.digest())
            fit_curvature(theta, t)
            if reservoir is not None:
                reservoir.extend(task.train)

            t0 = time.perf_counter()
            row, last_losses = _eval_row(theta, stream)
            R.append(row)
            timings["evaluate"] += time.perf_counter() - t0
    finally:
        if tmp is not None:
            tmp.cleanup()

    report = RunReport(
        strategy=strategy.strategy,
        root_seed=root,
        R=[list(map(float, r)) for r in R],
        avg_error=average_error(R),
        bwt=backward_transfer(R),
        final_errors=list(map(float, R[-1])),
        final_losses=[list(map(float, x)) for x in last_losses],
        merge_log=merge_log if strategy.strategy == "IHR" else [],
        param_hashes=hashes,
        config={"merge": asdict(strategy), "trainer": asdict(trainer), "memory_size": memory_size},
        linear_fraction=theta.linear_fraction(),
        timings=timings,
    )
    log.info(
        "%s seed=%d avg_error=%.4f bwt=%.4f timings=%s",
        strategy.strategy,
        root,
        report.avg_error,
        report.bwt,
        {k: round(v, 3) for k, v in timings.items()},
    )
    return report


def run_er(stream: TaskStream, memory_size, trainer: TrainerConfig, theta1: ParamSet | None = None):
    """Experience replay: reservoir memory mixed 1:1 into fine-tuning batches, no merge."""
    if memory_size < 1:
        raise InvalidConfig("memory_size must be >= 1")
    return run_continual(stream, MergeConfig(strategy="ER"), trainer, theta1=theta1, memory_size=memory_size)


@dataclass
class SweepResult:
    rows: list[dict]  # tau, arm, task1_error, task2_error, average
    theta1_errors: tuple
    tuned_hash: str
    theta1_hash: str


def tau_sweep(
    stream: TaskStream,
    taus,
    trainer: TrainerConfig,
    with_ihr=True,
    merge_cfg: MergeConfig | None = None,
    theta1: ParamSet | None = None,
):
    """Re-merge one fine-tuned checkpoint for task 2 over a grid of ``tau``.

    Arm ``NoIHR`` moves every parameter by ``tau * delta``. Arm ``IHR`` treats
    linear layers with the inverse curvature of task 1 and moves the remaining
    parameters by ``tau * delta`` too, so the arms differ only in the linear
    layers and both reduce to theta^1 at ``tau = 0``.
    """
    taus = [float(x) for x in taus]
    if any(x < 0 or not np.isfinite(x) for x in taus) or taus != sorted(taus):
        raise InvalidConfig("tau values must be finite, nonnegative and sorted")
    stream = stream.prefix(2)
    merge_cfg = merge_cfg or MergeConfig()
    root = stream.config.root_seed
    theta = theta1.copy() if theta1 is not None else train_first_task(stream, trainer)
    tuned = train(theta, stream[1].train, trainer.epochs_later, trainer.lr / trainer.lr_divisor, trainer, _rng(root, trainer, 1, 2))
    e1 = tuple(evaluate(theta, task.test)[0] for task in stream)
    factors = None
    if with_ihr:
        factors = curvature.estimate_factors(
            theta,
            stream[0],
            batch_size=trainer.factor_batch_size,
            max_examples=trainer.factor_max_examples,
            damping_scale=merge_cfg.damping_scale,
            kind=trainer.loss,
        )

    rows = []
    arms = [("IHR", True), ("NoIHR", False)] if with_ihr else [("NoIHR", False)]
    for name, use_ihr in arms:
        for tau in taus:
            plain = step_along_update(theta, tuned, tau)
            if use_ihr:
                cfg = replace(merge_cfg, strategy="IHR", tau=tau)
                merged = merge_ihr(theta, tuned, factors, cfg, t=2)
                params = ParamSet(merged.weights, plain.remaining)
            else:
                params = plain
            errs = [evaluate(params, task.test)[0] for task in stream]
            rows.append(
                {"tau": tau, "arm": name, "task1_error": errs[0], "task2_error": errs[1], "average": float(np.mean(errs))}
            )
    log.info("sweep seed=%d tuned_hash=%s", root, tuned.digest())
    return SweepResult(rows, e1, tuned.digest(), theta.digest())


def select_tau(
    stream: TaskStream,
    grid,
    trainer: TrainerConfig,
    merge_cfg: MergeConfig | None = None,
    theta1: ParamSet | None = None,
):
    """Pick ``tau`` on the first adaptation using validation splits only.

    Runs the real IHR merge at t=2 for every grid value and returns the one
    with the lowest mean validation error over tasks 1 and 2 (smallest on ties).
    The fine-tuning run is the same one :func:`run_continual` performs for task 2.
    """
    grid = sorted(float(x) for x in grid)
    if not grid or grid[0] <= 0:
        raise InvalidConfig("tau grid must be non-empty and positive")
    merge_cfg = merge_cfg or MergeConfig()
    root = stream.config.root_seed
    theta = theta1.copy() if theta1 is not None else train_first_task(stream, trainer)
    tuned = train(theta, stream[1].train, trainer.epochs_later, trainer.lr / trainer.lr_divisor, trainer, _rng(root, trainer, 1, 2))
    factors = curvature.estimate_factors(
        theta,
        stream[0],
        batch_size=trainer.factor_batch_size,
        max_examples=trainer.factor_max_examples,
        damping_scale=merge_cfg.damping_scale,
        kind=trainer.loss,
    )
    scores = []
    for tau in grid:
        merged = merge_ihr(theta, tuned, factors, replace(merge_cfg, strategy="IHR", tau=tau), t=2)
        scores.append(np.mean([evaluate(merged, stream[i].val)[0] for i in (0, 1)]))
    best = grid[int(np.argmin(scores))]
    log.info("select_tau seed=%d scores=%s -> tau=%g", root, [round(float(x), 4) for x in scores], best)
    return best


ABLATION_ROWS = (
    ("Fine-Tuning", MergeConfig(strategy="FineTune")),
    ("+ IHR factor_sum, alpha_p=0.50", MergeConfig(strategy="IHR", curvature_source="factor_sum", alpha_p_policy=0.5)),
    ("+ last_task curvature", MergeConfig(strategy="IHR", curvature_source="last_task", alpha_p_policy=0.5)),
    ("+ alpha_p=1/t", MergeConfig(strategy="IHR", curvature_source="last_task", alpha_p_policy="reciprocal_t")),
)


def ablation_ladder(stream: TaskStream, trainer: TrainerConfig, merge_cfg: MergeConfig | None = None, theta1: ParamSet | None = None):
    """The four-row ablation on one stream; every row starts from the same theta^1.

    ``tau``, ``damping`` and ``damping_scale`` of the IHR rows come from ``merge_cfg``.
    """
    if len(stream) < 3:
        raise InvalidConfig("ablation needs at least 3 tasks so factor_sum differs from last_task")
    base = merge_cfg or MergeConfig()
    theta1 = theta1 if theta1 is not None else train_first_task(stream, trainer)
    out = []
    for label, cfg in ABLATION_ROWS:
        if cfg.strategy == "IHR":
            cfg = replace(cfg, tau=base.tau, damping=base.damping, damping_scale=base.damping_scale)
        rep = run_continual(stream, cfg, trainer, theta1=theta1)
        out.append({"row": label, "avg_error": rep.avg_error, "bwt": rep.bwt, "report": rep})
    log.info("ablation seed=%d theta1_hash=%s", stream.config.root_seed, theta1.digest())
    return out
