"""Kronecker-factored curvature per linear layer.

For a layer ``s = W a + b`` the curvature block over ``vec(W)`` is
approximated by ``A (x) G`` with ``A = E[a a^T]`` and ``G = E[g g^T]``, where
``g = dL/ds`` (empirical Fisher, true labels). Applying its damped inverse to
an update ``D`` has the matrix form ``(G + lam I)^-1 D (A + lam I)^-1``.

Vectorization convention: ``vec`` is column-major, so the dense block that
reproduces :func:`ihvp` is ``kron(A + lam I, G + lam I)``.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ihr import linalg
from ihr.errors import (
    CorruptFile,
    EmptyDataset,
    IoFailure,
    ShapeMismatch,
    VersionMismatch,
)
from ihr.model import ParamSet, backward, forward, loss, loss_grad

MAGIC = b"IHRKFAC\x00"
FORMAT_VERSION = 1
DEFAULT_DAMPING_SCALE = 1.0

_HEAD = struct.Struct("<8sBI")  # magic, version, n_layers
_SHAPE = struct.Struct("<II")  # d_out, d_in
_TAIL = struct.Struct("<I")  # crc32


@dataclass
class KronFactors:
    A: list[np.ndarray]  # (d_in, d_in) per layer
    G: list[np.ndarray]  # (d_out, d_out) per layer
    sample_count: int
    damping: list[float]
    params_hash: str

    def __post_init__(self):
        if len(self.A) != len(self.G) or len(self.A) != len(self.damping):
            raise ShapeMismatch("A, G and damping must have one entry per layer")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        self.A = [np.asarray(a, dtype=np.float64) for a in self.A]
        self.G = [np.asarray(g, dtype=np.float64) for g in self.G]
        self.damping = [float(x) for x in self.damping]

    @property
    def shapes(self):
        """Per-layer ``(d_out, d_in)``, matching the weight matrices."""
        return [(g.shape[0], a.shape[0]) for a, g in zip(self.A, self.G)]

    def __len__(self):
        return len(self.A)

    @classmethod
    def identity(cls, shapes, params_hash, damping=0.0):
        """Unit factors; with zero damping the inverse curvature is the identity."""
        return cls(
            A=[np.eye(d_in) for _, d_in in shapes],
            G=[np.eye(d_out) for d_out, _ in shapes],
            sample_count=1,
            damping=[damping] * len(shapes),
            params_hash=params_hash,
        )

    def with_damping(self, damping):
        """Copy with every layer's damping replaced by ``damping``."""
        return KronFactors(self.A, self.G, self.sample_count, [damping] * len(self.A), self.params_hash)

    def nbytes(self):
        return sum(a.nbytes + g.nbytes for a, g in zip(self.A, self.G))


def default_damping(A, G, scale=DEFAULT_DAMPING_SCALE):
    return scale * (np.trace(A) / A.shape[0] + np.trace(G) / G.shape[0]) / 2.0


def _training_arrays(data):
    split = getattr(data, "train", data)
    if hasattr(split, "X"):
        return split.X, split.y
    X, y = split
    return np.asarray(X), np.asarray(y)


def estimate_factors(
    params: ParamSet,
    data,
    batch_size=256,
    max_examples=None,
    damping=None,
    damping_scale=DEFAULT_DAMPING_SCALE,
    kind="cross_entropy",
):
    """Accumulate ``A_l`` and ``G_l`` over the training split of ``data``.

    ``data`` is a TaskDataset or an ``(X, y)`` pair. Examples are visited in
    order, in batches, up to ``max_examples``. ``damping=None`` picks the
    scale-aware per-layer default.
    """
    X, y = _training_arrays(data)
    if max_examples is not None:
        X, y = X[:max_examples], y[:max_examples]
    n = len(X)
    if n == 0:
        raise EmptyDataset("cannot estimate curvature from an empty dataset")

    A = [np.zeros((d_in, d_in)) for _, d_in in params.shapes]
    G = [np.zeros((d_out, d_out)) for d_out, _ in params.shapes]
    for start in range(0, n, batch_size):
        xb, yb = X[start : start + batch_size], y[start : start + batch_size]
        logits, cache = forward(params, xb)
        loss(logits, yb, kind)  # raises on non-finite values
        _, tape = backward(params, cache, loss_grad(logits, yb, kind))
        for l in range(len(A)):
            A[l] += tape.a[l].T @ tape.a[l]
            G[l] += tape.g[l].T @ tape.g[l]
    A = [0.5 * (a + a.T) / n for a in A]
    G = [0.5 * (g + g.T) / n for g in G]
    if damping is None:
        lam = [default_damping(a, g, damping_scale) for a, g in zip(A, G)]
    else:
        lam = [float(damping)] * len(A)
    return KronFactors(A, G, n, lam, params.digest())


def ihvp(factors: KronFactors, layer, delta, damping=None):
    """Apply the damped inverse Kronecker curvature of ``layer`` to ``delta``.

    Returns ``(G + lam I)^-1 @ delta @ (A + lam I)^-1`` via two Cholesky solves.
    """
    A, G = factors.A[layer], factors.G[layer]
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (G.shape[0], A.shape[0]):
        raise ShapeMismatch(f"delta shape {delta.shape} != layer shape {(G.shape[0], A.shape[0])}")
    lam = factors.damping[layer] if damping is None else float(damping)
    left = linalg.sym_solve(G + lam * np.eye(G.shape[0]), delta)
    return linalg.sym_solve(A + lam * np.eye(A.shape[0]), left.T).T


def dense_block(factors: KronFactors, layer, damping=None):
    """The explicit damped curvature block for ``layer`` (oracle use only)."""
    A, G = factors.A[layer], factors.G[layer]
    lam = factors.damping[layer] if damping is None else float(damping)
    return linalg.kron(A + lam * np.eye(A.shape[0]), G + lam * np.eye(G.shape[0]))


def merge_factor_sets(history):
    """Layerwise mean of ``A`` and ``G`` over several tasks' factors.

    The hash is taken from the most recent entry, which is the set estimated
    at the parameters the next merge starts from.
    """
    if not history:
        raise ValueError("empty factor history")
    shapes = history[0].shapes
    for f in history[1:]:
        if f.shapes != shapes:
            raise ShapeMismatch(f"factor shapes differ: {f.shapes} vs {shapes}")
    m = len(history)
    A = [sum(f.A[l] for f in history) / m for l in range(len(shapes))]
    G = [sum(f.G[l] for f in history) / m for l in range(len(shapes))]
    lam = [sum(f.damping[l] for f in history) / m for l in range(len(shapes))]
    return KronFactors(A, G, sum(f.sample_count for f in history), lam, history[-1].params_hash)


def encode_factors(factors: KronFactors):
    parts = [_HEAD.pack(MAGIC, FORMAT_VERSION, len(factors))]
    parts += [_SHAPE.pack(d_out, d_in) for d_out, d_in in factors.shapes]
    parts.append(struct.pack(f"<{len(factors)}d", *factors.damping))
    parts.append(struct.pack("<Q", factors.sample_count))
    parts.append(bytes.fromhex(factors.params_hash))
    for a, g in zip(factors.A, factors.G):
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(g, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + _TAIL.pack(zlib.crc32(body))


def header_size(n_layers):
    return _HEAD.size + n_layers * (_SHAPE.size + 8) + 8 + 32


def decode_factors(raw: bytes):
    if len(raw) < _HEAD.size:
        raise CorruptFile("file shorter than header")
    magic, version, n_layers = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CorruptFile("bad magic")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"factor file version {version}, expected {FORMAT_VERSION}")
    if len(raw) < header_size(n_layers) + _TAIL.size:
        raise CorruptFile("file truncated inside header")
    body, (crc,) = raw[: -_TAIL.size], _TAIL.unpack(raw[-_TAIL.size :])
    if zlib.crc32(body) != crc:
        raise CorruptFile("checksum mismatch")

    off = _HEAD.size
    shapes = []
    for _ in range(n_layers):
        shapes.append(_SHAPE.unpack_from(body, off))
        off += _SHAPE.size
    damping = list(struct.unpack_from(f"<{n_layers}d", body, off))
    off += 8 * n_layers
    (count,) = struct.unpack_from("<Q", body, off)
    off += 8
    params_hash = body[off : off + 32].hex()
    off += 32
    A, G = [], []
    for d_out, d_in in shapes:
        need = 8 * (d_in * d_in + d_out * d_out)
        if off + need > len(body):
            raise CorruptFile("file truncated inside factor data")
        A.append(np.frombuffer(body, "<f8", d_in * d_in, off).reshape(d_in, d_in).copy())
        off += 8 * d_in * d_in
        G.append(np.frombuffer(body, "<f8", d_out * d_out, off).reshape(d_out, d_out).copy())
        off += 8 * d_out * d_out
    if off != len(body):
        raise CorruptFile("trailing bytes after factor data")
    return KronFactors(A, G, count, damping, params_hash)


def read_header_shapes(path):
    """Layer shapes declared in a factor file header."""
    raw = Path(path).read_bytes()
    _, _, n_layers = _HEAD.unpack_from(raw, 0)
    return [_SHAPE.unpack_from(raw, _HEAD.size + i * _SHAPE.size) for i in range(n_layers)]


def save_factors(factors: KronFactors, path):
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    data = encode_factors(factors)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def load_factors(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_factors(raw)
