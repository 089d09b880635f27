"""Synthetic classification task streams with controllable input shift.

Every task shares the same ``k`` Gaussian class clusters. Task ``t`` rotates
the first two input coordinates by a scheduled angle and adds isotropic noise,
which plays the role of an accent or microphone shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ihr.errors import InvalidConfig, ShapeMismatch
from ihr.model import ParamSet, forward, loss

DEFAULT_ANGLES_DEG = (0.0, 25.0, 50.0, 75.0, 100.0)


@dataclass
class Split:
    X: np.ndarray  # (n, d)
    y: np.ndarray  # (n,) int

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return Split(self.X[idx], self.y[idx])


@dataclass
class TaskDataset:
    task_id: int
    train: Split
    val: Split
    test: Split
    seed: tuple
    angle: float  # radians
    noise: float


@dataclass(frozen=True)
class StreamConfig:
    """Generation settings for :func:`make_stream`.

    Angles are in degrees, one per task. ``plane_scale`` and ``other_scale``
    set the spread of the class means inside and outside the rotated plane.
    """

    root_seed: int = 0
    num_tasks: int = 5
    dim: int = 16
    num_classes: int = 4
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    angles_deg: tuple = DEFAULT_ANGLES_DEG
    noise: float | tuple = 0.1
    plane_scale: float = 2.0
    other_scale: float = 0.5
    cluster_std: float = 1.0

    def noise_for(self, t):
        if isinstance(self.noise, (tuple, list)):
            return float(self.noise[t - 1])
        return float(self.noise)


@dataclass
class TaskStream:
    tasks: list[TaskDataset]
    config: StreamConfig
    means: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)

    def prefix(self, n):
        return TaskStream(self.tasks[:n], self.config, self.means)


def rotate_plane(X, angle):
    """Rotate coordinates 0 and 1 of every row by ``angle`` radians."""
    X = np.array(X, dtype=np.float64, copy=True)
    c, s = np.cos(angle), np.sin(angle)
    x0, x1 = X[:, 0].copy(), X[:, 1].copy()
    X[:, 0] = c * x0 - s * x1
    X[:, 1] = s * x0 + c * x1
    return X


def _validate(cfg: StreamConfig):
    if cfg.num_tasks < 2:
        raise InvalidConfig("stream needs at least 2 tasks")
    if cfg.num_classes < 2:
        raise InvalidConfig("need at least 2 classes")
    if cfg.dim < 2:
        raise InvalidConfig("need input dimension >= 2 for the rotated plane")
    if len(cfg.angles_deg) != cfg.num_tasks:
        raise InvalidConfig(f"{len(cfg.angles_deg)} angles given for {cfg.num_tasks} tasks")
    if isinstance(cfg.noise, (tuple, list)) and len(cfg.noise) != cfg.num_tasks:
        raise InvalidConfig("noise schedule length must match num_tasks")
    if min(cfg.n_train, cfg.n_val, cfg.n_test) < 1:
        raise InvalidConfig("every split needs at least one example")
    if cfg.cluster_std < 0 or any(cfg.noise_for(t) < 0 for t in range(1, cfg.num_tasks + 1)):
        raise InvalidConfig("noise scales must be nonnegative")


def class_means(cfg: StreamConfig):
    rng = np.random.default_rng(np.random.SeedSequence(cfg.root_seed, spawn_key=(0,)))
    scale = np.full(cfg.dim, cfg.other_scale)
    scale[:2] = cfg.plane_scale
    return rng.standard_normal((cfg.num_classes, cfg.dim)) * scale


def split_seed(root_seed, task_id, split_index):
    return np.random.SeedSequence(root_seed, spawn_key=(1, task_id, split_index))


def sample_base(means, n, cluster_std, seed_seq):
    """Unshifted draw: balanced labels, Gaussian around the class means.

    Returns ``(Z, y, rng)`` so the caller keeps drawing from the same stream.
    """
    rng = np.random.default_rng(seed_seq)
    k, d = means.shape
    y = rng.permutation(np.arange(n) % k)
    Z = means[y] + cluster_std * rng.standard_normal((n, d))
    return Z, y, rng


def _make_split(cfg, means, task_id, split_index, n):
    Z, y, rng = sample_base(means, n, cfg.cluster_std, split_seed(cfg.root_seed, task_id, split_index))
    angle = np.deg2rad(cfg.angles_deg[task_id - 1])
    X = rotate_plane(Z, angle) + cfg.noise_for(task_id) * rng.standard_normal(Z.shape)
    return Split(X, y.astype(np.int64))


def make_stream(cfg: StreamConfig | None = None, **overrides):
    """Build the task stream for ``cfg``; keyword overrides replace config fields."""
    cfg = cfg or StreamConfig()
    if overrides:
        cfg = StreamConfig(**{**cfg.__dict__, **overrides})
    _validate(cfg)
    means = class_means(cfg)
    tasks = []
    for t in range(1, cfg.num_tasks + 1):
        tasks.append(
            TaskDataset(
                task_id=t,
                train=_make_split(cfg, means, t, 0, cfg.n_train),
                val=_make_split(cfg, means, t, 1, cfg.n_val),
                test=_make_split(cfg, means, t, 2, cfg.n_test),
                seed=(cfg.root_seed, t),
                angle=float(np.deg2rad(cfg.angles_deg[t - 1])),
                noise=cfg.noise_for(t),
            )
        )
    return TaskStream(tasks, cfg, means)


def evaluate(params: ParamSet, split: Split, kind="cross_entropy"):
    """Misclassification rate under argmax, and per-example losses."""
    if len(split) == 0:
        raise InvalidConfig("cannot evaluate on an empty split")
    logits, _ = forward(params, split.X)
    if kind == "cross_entropy" and logits.shape[1] <= int(split.y.max()):
        raise ShapeMismatch(f"model has {logits.shape[1]} outputs, labels go up to {int(split.y.max())}")
    per, _ = loss(logits, split.y, kind)
    err = float(np.mean(np.argmax(logits, axis=1) != split.y))
    return err, per


def export_split(split: Split, path):
    """One example per line: comma-separated features, then the integer label."""
    with open(path, "w") as fh:
        for x, y in zip(split.X, split.y):
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(y)}\n")


def import_split(path):
    rows = [line.strip().split(",") for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise InvalidConfig(f"{path} holds no examples")
    if len({len(r) for r in rows}) != 1:
        raise InvalidConfig(f"{path} has ragged rows")
    X = np.array([[float(v) for v in r[:-1]] for r in rows])
    y = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    return Split(X, y)
