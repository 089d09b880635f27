"""Merging rules applied after fine-tuning on a new task.

IHR rescales each linear layer's update by the previous task's inverse
curvature and then restores its norm to ``tau`` times the raw update norm.
Biases and other non-matrix parameters are interpolated with a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ihr.curvature import DEFAULT_DAMPING_SCALE, KronFactors, ihvp
from ihr.errors import FactorMismatch, InvalidConfig, ShapeMismatch, ZeroAdjustedUpdate
from ihr.linalg import frobenius_norm
from ihr.model import ParamSet

STRATEGIES = ("FineTune", "FTA", "ER", "IHR")
CURVATURE_SOURCES = ("last_task", "factor_sum", "identity")


@dataclass(frozen=True)
class MergeConfig:
    """Strategy selector plus IHR knobs.

    ``alpha_p_policy`` is ``"reciprocal_t"`` or a constant in [0, 1].
    ``damping`` overrides the damping stored with the factors when set;
    otherwise each layer gets ``damping_scale`` times its mean factor trace.
    ``curvature_source="identity"`` swaps in unit factors, used for
    reduction checks against plain fine-tuning.
    """

    strategy: str = "IHR"
    tau: float = 1.0
    alpha_p_policy: str | float = "reciprocal_t"
    curvature_source: str = "last_task"
    damping: float | None = None
    damping_scale: float = DEFAULT_DAMPING_SCALE

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidConfig(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not np.isfinite(self.tau) or self.tau < 0:
            raise InvalidConfig(f"tau must be a finite nonnegative number, got {self.tau}")
        if self.curvature_source not in CURVATURE_SOURCES:
            raise InvalidConfig(f"unknown curvature_source {self.curvature_source!r}")
        if self.alpha_p_policy != "reciprocal_t":
            try:
                v = float(self.alpha_p_policy)
            except (TypeError, ValueError):
                raise InvalidConfig(f"bad alpha_p_policy {self.alpha_p_policy!r}") from None
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(f"constant alpha_p must lie in [0, 1], got {v}")
        if self.damping_scale < 0:
            raise InvalidConfig("damping_scale must be nonnegative")
        if self.damping is not None and self.damping < 0:
            raise InvalidConfig("damping must be nonnegative")


def alpha_p(policy, t):
    if t < 2:
        raise ValueError(f"merging starts at task 2, got t={t}")
    if policy == "reciprocal_t":
        return 1.0 / t
    return float(policy)


def compute_alpha(delta, adjusted, tau):
    """Scale that gives ``alpha * adjusted`` the norm ``tau * ||delta||``.

    A zero ``delta`` yields 0, so the layer stays where it was.
    """
    nd = frobenius_norm(delta)
    if nd == 0.0:
        return 0.0
    na = frobenius_norm(adjusted)
    if na == 0.0:
        raise ZeroAdjustedUpdate("adjusted update vanished for a nonzero update")
    return tau * nd / na


def _interpolate(prev, tuned, w):
    return prev + w * (tuned - prev)


def merge_ihr(prev: ParamSet, tuned: ParamSet, factors: KronFactors, cfg: MergeConfig, t, check_hash=True):
    """theta^t from theta^{t-1} and the fine-tuned theta~^t; inputs are left untouched."""
    prev.check_compatible(tuned)
    if factors.shapes != prev.shapes:
        raise ShapeMismatch(f"factor shapes {factors.shapes} != weight shapes {prev.shapes}")
    if check_hash and factors.params_hash != prev.digest():
        raise FactorMismatch("factors were not estimated at the pre-adaptation parameters")

    weights = []
    for l, (w0, w1) in enumerate(zip(prev.weights, tuned.weights)):
        delta = w1 - w0
        if not np.any(delta):
            weights.append(w0.copy())
            continue
        adjusted = ihvp(factors, l, delta, damping=cfg.damping)
        weights.append(w0 + compute_alpha(delta, adjusted, cfg.tau) * adjusted)

    ap = alpha_p(cfg.alpha_p_policy, t)
    rem = {k: _interpolate(prev.remaining[k], tuned.remaining[k], ap) for k in prev.remaining}
    return ParamSet(weights, rem)


def merge_fta(prev: ParamSet, tuned: ParamSet, t):
    """Weight averaging: every parameter moves 1/t of the way to the fine-tuned value."""
    prev.check_compatible(tuned)
    if t < 2:
        raise ValueError(f"merging starts at task 2, got t={t}")
    eta = 1.0 / t
    return ParamSet(
        [_interpolate(w0, w1, eta) for w0, w1 in zip(prev.weights, tuned.weights)],
        {k: _interpolate(prev.remaining[k], tuned.remaining[k], eta) for k in prev.remaining},
    )


def step_along_update(prev: ParamSet, tuned: ParamSet, tau):
    """``prev + tau * (tuned - prev)`` on every parameter (the no-curvature sweep arm)."""
    prev.check_compatible(tuned)
    return ParamSet(
        [_interpolate(w0, w1, tau) for w0, w1 in zip(prev.weights, tuned.weights)],
        {k: _interpolate(prev.remaining[k], tuned.remaining[k], tau) for k in prev.remaining},
    )


def merge(prev: ParamSet, tuned: ParamSet, cfg: MergeConfig, t, factors: KronFactors | None = None):
    """Dispatch on ``cfg.strategy``. FineTune and ER keep the tuned parameters."""
    if cfg.strategy in ("FineTune", "ER"):
        prev.check_compatible(tuned)
        return tuned.copy()
    if cfg.strategy == "FTA":
        return merge_fta(prev, tuned, t)
    if factors is None:
        raise ValueError("IHR merge needs curvature factors")
    return merge_ihr(prev, tuned, factors, cfg, t)
