import math

import numpy as np
import pytest

from ihr.errors import CorruptFile, NonFiniteLoss, ShapeMismatch, VersionMismatch
from ihr.model import (
    ParamSet,
    backward,
    forward,
    init_params,
    load_params,
    loss,
    loss_grad,
    save_params,
)


def net(seed, sizes=(4, 5, 3)):
    return init_params(list(sizes), np.random.default_rng(seed))


def objective(params, X, y, kind):
    logits, _ = forward(params, X)
    return loss(logits, y, kind)[1]


def fd_check(params, X, y, kind, h=1e-5):
    logits, cache = forward(params, X)
    grad, _ = backward(params, cache, loss_grad(logits, y, kind))
    flat = params.flatten()
    analytic = grad.flatten()
    worst = 0.0
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        num = (objective(params.unflatten(up), X, y, kind) - objective(params.unflatten(dn), X, y, kind)) / (2 * h)
        worst = max(worst, abs(num - analytic[i]) / max(1.0, abs(num), abs(analytic[i])))
    return worst


def test_zero_net_gives_zero_logits():
    p = ParamSet([np.zeros((3, 4)), np.zeros((2, 3))], {"b0": np.zeros(3), "b1": np.zeros(2)})
    logits, _ = forward(p, np.random.default_rng(0).standard_normal((5, 4)))
    assert np.all(logits == 0.0)


def test_identity_layer():
    p = ParamSet([np.eye(3)], {"b0": np.zeros(3)})
    v = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_array_equal(forward(p, v)[0], v)


def test_forward_matches_hand_rolled_chain():
    p = net(5)
    x = np.random.default_rng(105).standard_normal((3, 4))
    W0, W1 = p.weights
    b0, b1 = p.bias(0), p.bias(1)
    expect = np.zeros((3, 3))
    for n in range(3):
        h = [math.tanh(sum(W0[i, j] * x[n, j] for j in range(4)) + b0[i]) for i in range(5)]
        for o in range(3):
            expect[n, o] = sum(W1[o, i] * h[i] for i in range(5)) + b1[o]
    np.testing.assert_allclose(forward(p, x)[0], expect, atol=1e-12)


def test_forward_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        forward(net(0), np.ones((2, 7)))


def test_chain_compatibility_enforced():
    with pytest.raises(ShapeMismatch):
        ParamSet([np.zeros((3, 4)), np.zeros((2, 5))], {})


def test_gradient_finite_differences_seed9():
    p = net(9)
    rng = np.random.default_rng(109)
    X = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, 6)
    assert fd_check(p, X, y, "cross_entropy") <= 1e-4


def test_gradient_finite_differences_three_layers_squared():
    p = net(12, (3, 6, 4, 2))
    rng = np.random.default_rng(112)
    X = rng.standard_normal((5, 3))
    T = rng.standard_normal((5, 2))
    assert fd_check(p, X, T, "squared") <= 1e-4


def test_zero_gradient_at_perfect_fit():
    p = net(1)
    X = np.random.default_rng(2).standard_normal((4, 4))
    logits, cache = forward(p, X)
    grad, _ = backward(p, cache, loss_grad(logits, logits.copy(), "squared"))
    assert np.all(grad.flatten() == 0.0)


def test_single_layer_gradient_is_outer_product():
    rng = np.random.default_rng(4)
    p = ParamSet([rng.standard_normal((2, 3))], {"b0": rng.standard_normal(2)})
    a = rng.standard_normal((1, 3))
    t = rng.standard_normal((1, 2))
    logits, cache = forward(p, a)
    g = logits - t
    grad, tape = backward(p, cache, loss_grad(logits, t, "squared"))
    np.testing.assert_array_equal(grad.weights[0], g.T @ a)
    np.testing.assert_array_equal(tape.g[0], g)


def test_tape_reconstructs_gradient():
    p = net(6, (4, 8, 6, 3))
    rng = np.random.default_rng(7)
    X = rng.standard_normal((11, 4))
    y = rng.integers(0, 3, 11)
    logits, cache = forward(p, X)
    grad, tape = backward(p, cache, loss_grad(logits, y))
    assert len(tape.a) == len(tape.g) == 3
    for l in range(3):
        assert tape.a[l].shape == (11, p.weights[l].shape[1])
        assert tape.g[l].shape == (11, p.weights[l].shape[0])
        recon = np.mean([np.outer(tape.g[l][i], tape.a[l][i]) for i in range(11)], axis=0)
        np.testing.assert_allclose(recon, grad.weights[l], atol=1e-10)


def test_backward_is_deterministic():
    p = net(3)
    X = np.random.default_rng(8).standard_normal((9, 4))
    y = np.arange(9) % 3
    runs = []
    for _ in range(2):
        logits, cache = forward(p, X)
        g, _ = backward(p, cache, loss_grad(logits, y))
        runs.append(g.flatten())
    assert np.array_equal(runs[0], runs[1])


def test_uniform_logits_cross_entropy():
    per, mean = loss(np.zeros((3, 4)), [0, 1, 3])
    np.testing.assert_allclose(per, math.log(4), rtol=1e-15)
    assert mean == pytest.approx(math.log(4))


def test_squared_loss_zero_at_target():
    p = np.random.default_rng(0).standard_normal((3, 2))
    assert loss(p, p, "squared")[1] == 0.0


def test_cross_entropy_brute_force():
    rng = np.random.default_rng(13)
    logits = rng.standard_normal((7, 5)) * 3
    y = rng.integers(0, 5, 7)
    per, _ = loss(logits, y)
    for i in range(7):
        z = sum(math.exp(v) for v in logits[i])
        assert per[i] == pytest.approx(-math.log(math.exp(logits[i, y[i]]) / z), rel=1e-12)


def test_loss_errors():
    with pytest.raises(NonFiniteLoss):
        loss(np.array([[np.nan, 0.0]]), [0])
    with pytest.raises(ShapeMismatch):
        loss(np.zeros((2, 3)), [0])
    with pytest.raises(ValueError):
        loss(np.zeros((1, 2)), [0], kind="hinge")


def test_param_partition_is_exhaustive():
    p = net(0, (16, 32, 4))
    assert p.num_params() == 16 * 32 + 32 + 32 * 4 + 4
    assert p.linear_fraction() == pytest.approx((16 * 32 + 32 * 4) / p.num_params())
    assert np.array_equal(p.unflatten(p.flatten()).flatten(), p.flatten())


def test_digest_tracks_values():
    p = net(0)
    q = p.copy()
    assert p.digest() == q.digest()
    q.weights[0][0, 0] += 1e-12
    assert p.digest() != q.digest()


def test_checkpoint_roundtrip(tmp_path):
    p = net(21, (4, 6, 6, 3))
    save_params(p, tmp_path / "p.npz")
    q = load_params(tmp_path / "p.npz")
    assert q.digest() == p.digest()
    assert list(q.remaining) == list(p.remaining)


def test_checkpoint_errors(tmp_path):
    p = net(0)
    path = tmp_path / "p.npz"
    save_params(p, path)
    raw = dict(np.load(path))
    raw["format_version"] = np.array(99)
    np.savez(tmp_path / "v.npz", **raw)
    with pytest.raises(VersionMismatch):
        load_params(tmp_path / "v.npz")
    (tmp_path / "bad.npz").write_bytes(path.read_bytes()[:40])
    with pytest.raises(CorruptFile):
        load_params(tmp_path / "bad.npz")
