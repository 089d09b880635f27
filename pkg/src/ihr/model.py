"""A tanh MLP with hand-written forward and backward passes.

The backward pass keeps, for every linear layer, the per-example layer input
``a`` and the per-example gradient ``g`` of the loss with respect to the
layer's pre-activation ``s = W a + b``. Those two streams are all that
Kronecker factor estimation needs.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ihr.errors import CorruptFile, IoFailure, NonFiniteLoss, ShapeMismatch, VersionMismatch

CHECKPOINT_VERSION = 1


@dataclass
class ParamSet:
    """Model parameters split into linear weight matrices and everything else.

    ``weights[l]`` has shape ``(d_out, d_in)``. ``remaining`` maps names to
    arrays; for the MLP these are the biases ``b0, b1, ...``.
    """

    weights: list[np.ndarray]
    remaining: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.remaining = {k: np.asarray(v, dtype=np.float64) for k, v in self.remaining.items()}
        for l in range(1, len(self.weights)):
            if self.weights[l].shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeMismatch(
                    f"layer {l} expects input dim {self.weights[l].shape[1]}, "
                    f"previous layer outputs {self.weights[l - 1].shape[0]}"
                )

    @property
    def shapes(self):
        return [w.shape for w in self.weights]

    def bias(self, l):
        return self.remaining[f"b{l}"]

    def copy(self):
        return ParamSet([w.copy() for w in self.weights], {k: v.copy() for k, v in self.remaining.items()})

    def check_compatible(self, other: ParamSet):
        if self.shapes != other.shapes:
            raise ShapeMismatch(f"weight shapes differ: {self.shapes} vs {other.shapes}")
        if list(self.remaining) != list(other.remaining) or any(
            self.remaining[k].shape != other.remaining[k].shape for k in self.remaining
        ):
            raise ShapeMismatch("remaining parameters differ in names or shapes")

    def num_params(self):
        return sum(w.size for w in self.weights) + sum(v.size for v in self.remaining.values())

    def linear_fraction(self):
        """Fraction of all parameters that sit in linear weight matrices."""
        return sum(w.size for w in self.weights) / self.num_params()

    def flatten(self):
        parts = [w.ravel() for w in self.weights] + [v.ravel() for v in self.remaining.values()]
        return np.concatenate(parts)

    def unflatten(self, flat):
        """Inverse of :meth:`flatten`, using this ParamSet's layout."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params():
            raise ShapeMismatch(f"expected {self.num_params()} values, got {flat.size}")
        out, i = [], 0
        for w in self.weights:
            out.append(flat[i : i + w.size].reshape(w.shape).copy())
            i += w.size
        rem = {}
        for k, v in self.remaining.items():
            rem[k] = flat[i : i + v.size].reshape(v.shape).copy()
            i += v.size
        return ParamSet(out, rem)

    def digest(self):
        """SHA-256 over shapes, names and raw float64 bytes."""
        h = hashlib.sha256()
        for w in self.weights:
            h.update(repr(w.shape).encode())
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        for k, v in self.remaining.items():
            h.update(k.encode())
            h.update(repr(v.shape).encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def allclose(self, other: ParamSet, atol=0.0):
        self.check_compatible(other)
        return float(np.max(np.abs(self.flatten() - other.flatten()))) <= atol


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # a_l, shape (n, d_in_l)
    preacts: list[np.ndarray]  # s_l, shape (n, d_out_l)


@dataclass
class BackpropTape:
    a: list[np.ndarray]  # per-layer (n, d_in)
    g: list[np.ndarray]  # per-layer (n, d_out), d loss_i / d s_l
    losses: np.ndarray | None = None


def init_params(sizes, rng):
    """Uniform fan-in init in [-1/sqrt(d_in), 1/sqrt(d_in)] for weights and biases.

    ``sizes`` lists layer widths from input to output, e.g. ``[16, 32, 4]``.
    """
    if len(sizes) < 2:
        raise ShapeMismatch("need at least an input and an output size")
    weights, rem = [], {}
    for l, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_out, d_in)))
        rem[f"b{l}"] = rng.uniform(-bound, bound, size=d_out)
    return ParamSet(weights, rem)


def forward(params: ParamSet, inputs):
    """Return ``(logits, cache)``. tanh between layers, identity on the last."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.weights[0].shape[1]:
        raise ShapeMismatch(f"input dim {x.shape[1]} != first layer d_in {params.weights[0].shape[1]}")
    acts, pre = [], []
    h = x
    last = len(params.weights) - 1
    for l, w in enumerate(params.weights):
        acts.append(h)
        s = h @ w.T + params.bias(l)
        pre.append(s)
        h = s if l == last else np.tanh(s)
    return h, ForwardCache(acts, pre)


def backward(params: ParamSet, cache: ForwardCache, dlogits):
    """Backpropagate per-example output gradients.

    ``dlogits[i]`` is the gradient of example ``i``'s own loss with respect to
    its logits. Returns the batch-mean gradient as a ParamSet plus the tape of
    per-example ``(a_l, g_l)``.
    """
    g = np.asarray(dlogits, dtype=np.float64)
    n = g.shape[0]
    if g.shape != cache.preacts[-1].shape:
        raise ShapeMismatch(f"dlogits shape {g.shape} != output shape {cache.preacts[-1].shape}")
    L = len(params.weights)
    gs = [None] * L
    grad_w = [None] * L
    grad_b = {}
    for l in range(L - 1, -1, -1):
        gs[l] = g
        grad_w[l] = g.T @ cache.inputs[l] / n
        grad_b[f"b{l}"] = g.mean(axis=0)
        if l > 0:
            # tanh'(s) = 1 - tanh(s)^2, and cache.inputs[l] == tanh(s_{l-1})
            g = (g @ params.weights[l]) * (1.0 - cache.inputs[l] ** 2)
    rem = {f"b{l}": grad_b[f"b{l}"] for l in range(L)}
    return ParamSet(grad_w, rem), BackpropTape(list(cache.inputs), gs)


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(predictions, targets, kind="cross_entropy"):
    """Per-example losses and their mean.

    ``cross_entropy`` takes integer class targets and applies a softmax;
    ``squared`` takes targets shaped like the predictions and uses 0.5*||y - t||^2.
    """
    p = np.asarray(predictions, dtype=np.float64)
    if kind == "cross_entropy":
        t = np.asarray(targets, dtype=np.int64)
        if t.shape[0] != p.shape[0]:
            raise ShapeMismatch("batch sizes differ")
        per = -_log_softmax(p)[np.arange(p.shape[0]), t]
    elif kind == "squared":
        t = np.asarray(targets, dtype=np.float64)
        if t.shape != p.shape:
            raise ShapeMismatch("prediction and target shapes differ")
        per = 0.5 * np.sum((p - t) ** 2, axis=1)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    if not np.all(np.isfinite(per)):
        raise NonFiniteLoss("loss contains non-finite values")
    return per, float(per.mean())


def loss_grad(predictions, targets, kind="cross_entropy"):
    """Gradient of each example's own loss with respect to its logits."""
    p = np.asarray(predictions, dtype=np.float64)
    if kind == "cross_entropy":
        t = np.asarray(targets, dtype=np.int64)
        probs = np.exp(_log_softmax(p))
        probs[np.arange(p.shape[0]), t] -= 1.0
        return probs
    if kind == "squared":
        return p - np.asarray(targets, dtype=np.float64)
    raise ValueError(f"unknown loss kind {kind!r}")


def predict(params: ParamSet, inputs):
    logits, _ = forward(params, inputs)
    return logits


# checkpoint files: npz with a version scalar, then w{l} and r:{name} arrays


def save_params(params: ParamSet, path):
    arrays = {"format_version": np.array(CHECKPOINT_VERSION, dtype=np.int64)}
    arrays["remaining_names"] = np.array(list(params.remaining), dtype=str)
    for l, w in enumerate(params.weights):
        arrays[f"w{l}"] = w
    for k, v in params.remaining.items():
        arrays[f"r:{k}"] = v
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_params(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    try:
        with np.load(io.BytesIO(raw), allow_pickle=False) as z:
            version = int(z["format_version"])
            if version != CHECKPOINT_VERSION:
                raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
            names = [str(s) for s in z["remaining_names"]]
            n_layers = sum(1 for k in z.files if k.startswith("w"))
            weights = [z[f"w{l}"] for l in range(n_layers)]
            rem = {k: z[f"r:{k}"] for k in names}
    except (VersionMismatch, ShapeMismatch):
        raise
    except Exception as exc:
        raise CorruptFile(f"unreadable checkpoint {path}: {exc}") from exc
    return ParamSet(weights, rem)
