"""Paired significance testing on per-example losses."""

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 12
MIN_PAIRS = 10


def _signed_rank_stat(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0.0]
    ranks = rankdata(np.abs(d))  # mid-ranks on ties
    return float(ranks[d > 0].sum()), ranks


def wilcoxon_exact(a, b):
    """Two-sided p-value by enumerating all 2^n sign assignments of the ranks."""
    w_plus, ranks = _signed_rank_stat(a, b)
    n = len(ranks)
    if n == 0:
        return 1.0
    if n > 20:
        raise ValueError(f"exact enumeration over 2^{n} sign patterns is too large")
    mask = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
    dist = mask @ ranks
    center = n * (n + 1) / 4.0
    obs = abs(w_plus - center)
    return float(np.mean(np.abs(dist - center) >= obs - 1e-9))


def wilcoxon_normal(a, b):
    """Two-sided p-value from the normal approximation.

    Uses the tie-corrected variance and a 0.5 continuity correction.
    """
    w_plus, ranks = _signed_rank_stat(a, b)
    n = len(ranks)
    if n == 0:
        return 1.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts**3 - counts) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - n * (n + 1) / 4.0) - 0.5, 0.0) / np.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(z)))


def wilcoxon_signed_rank(losses_a, losses_b, method="auto"):
    """Wilcoxon signed-rank test for paired per-example values.

    Zero differences are dropped. ``method="auto"`` enumerates exactly when at
    most 12 nonzero pairs remain and uses the normal approximation otherwise.
    All-zero differences give p = 1.
    """
    a = np.asarray(losses_a, dtype=np.float64)
    b = np.asarray(losses_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("need two 1-D arrays of equal length")
    if len(a) < MIN_PAIRS:
        raise ValueError(f"need at least {MIN_PAIRS} pairs, got {len(a)}")
    n_nonzero = int(np.count_nonzero(a - b))
    if n_nonzero == 0:
        return 1.0
    if method == "exact" or (method == "auto" and n_nonzero <= EXACT_MAX_N):
        return wilcoxon_exact(a, b)
    if method not in ("auto", "normal"):
        raise ValueError(f"unknown method {method!r}")
    return wilcoxon_normal(a, b)
