"""Small dense kernels for symmetric matrices.

Inverses are never formed explicitly; everything goes through a Cholesky
factorization and triangular solves.
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ihr.errors import DimensionOverflow, NotPositiveDefinite, ShapeMismatch

KRON_ORACLE_LIMIT = 4096


def as_sym(m, atol=1e-10):
    """Validate that ``m`` is a square symmetric 2-D array and return it as float64."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise ShapeMismatch(f"expected a non-empty square matrix, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=0.0, atol=atol):
        raise ValueError("matrix is not symmetric")
    return m


def sym_solve(m, rhs):
    """Solve ``m @ X = rhs`` for symmetric positive definite ``m``.

    ``rhs`` may be a vector or a ``dim x k`` matrix; the result has the same shape.
    """
    m = as_sym(m)
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] != m.shape[0]:
        raise ShapeMismatch(f"rhs has {rhs.shape[0]} rows, matrix is {m.shape[0]}x{m.shape[0]}")
    try:
        factor = cho_factor(m, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return cho_solve(factor, rhs)


def kron(a, b, limit=KRON_ORACLE_LIMIT):
    """Dense Kronecker product ``a (x) b``. Test oracle only, hence the size cap."""
    a = as_sym(a)
    b = as_sym(b)
    dim = a.shape[0] * b.shape[0]
    if dim > limit:
        raise DimensionOverflow(f"kron dimension {dim} exceeds oracle limit {limit}")
    return np.kron(a, b)


def frobenius_norm(m):
    m = np.asarray(m, dtype=np.float64)
    peak = float(np.max(np.abs(m))) if m.size else 0.0
    if peak == 0.0 or not np.isfinite(peak):
        return peak
    # scaled so tiny or huge entries neither underflow nor overflow when squared
    s = m / peak
    return peak * float(np.sqrt(np.sum(s * s)))


def vec(m):
    """Column-major vectorization, the convention paired with ``kron(A, G)``.

    With this ordering ``kron(A, G) @ vec(X) == vec(G @ X @ A)`` for symmetric A.
    """
    return np.asarray(m, dtype=np.float64).reshape(-1, order="F")


def unvec(v, shape):
    return np.asarray(v, dtype=np.float64).reshape(shape, order="F")
