import numpy as np
import pytest

from fedconflict.nn import (
    AdamState, GradientSet, Mlp, NonFiniteError, adam_step, adam_update, mlp_backward,
    mlp_forward, polyak_update,
)

from helpers import finite_difference_check


def test_zero_net_outputs_zero():
    net = Mlp.zeros([3, 4, 2])
    np.testing.assert_array_equal(mlp_forward(net, [1.0, -2.0, 3.0]), [0.0, 0.0])


def test_identity_single_layer():
    net = Mlp.zeros([3, 3])
    net.weights[0][...] = np.eye(3)
    x = np.array([0.5, -1.5, 2.0])
    np.testing.assert_array_equal(mlp_forward(net, x), x)


def test_forward_matches_hand_computation():
    rng = np.random.default_rng(0)
    net = Mlp.init([4, 5, 3], rng)
    x = rng.normal(size=4)
    w1, b1, w2, b2 = net.params()
    hidden = [np.tanh(sum(x[i] * w1[i, j] for i in range(4)) + b1[j]) for j in range(5)]
    want = [sum(hidden[j] * w2[j, k] for j in range(5)) + b2[k] for k in range(3)]
    np.testing.assert_allclose(mlp_forward(net, x), want, atol=1e-12)


def test_forward_dimension_mismatch():
    net = Mlp.init([4, 2], np.random.default_rng(0))
    with pytest.raises(ValueError):
        mlp_forward(net, np.zeros(3))


def test_backward_zero_output_grad():
    net = Mlp.init([3, 4, 2], np.random.default_rng(1))
    grads = mlp_backward(net, np.ones(3), np.zeros(2))
    assert all(np.all(g == 0) for g in grads.params())


def test_backward_linear_is_outer_product():
    net = Mlp.init([3, 2], np.random.default_rng(2))
    x = np.array([1.0, 2.0, -1.0])
    g = np.array([0.5, -3.0])
    grads = mlp_backward(net, x, g)
    np.testing.assert_allclose(grads.weights[0], np.outer(x, g))
    np.testing.assert_allclose(grads.biases[0], g)


def test_backward_dimension_mismatch():
    net = Mlp.init([3, 2], np.random.default_rng(2))
    with pytest.raises(ValueError):
        mlp_backward(net, np.ones(3), np.ones(3))


@pytest.mark.parametrize("sizes", [[3, 2], [4, 6, 3], [5, 8, 8, 1], [6, 64, 64, 3]])
def test_backward_matches_finite_differences(sizes):
    rng = np.random.default_rng(sum(sizes))
    net = Mlp.init(sizes, rng)
    x = rng.normal(size=(3, sizes[0]))
    g = rng.normal(size=(3, sizes[-1]))
    assert finite_difference_check(net, x, g) < 1e-4


def test_adam_zero_gradient_leaves_params():
    net = Mlp.init([3, 2], np.random.default_rng(0))
    before = net.copy()
    zeros = GradientSet([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])
    adam_step(net, zeros, AdamState.for_params(net.params()), lr=0.1)
    for a, b in zip(net.params(), before.params()):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("g", [3.0, -0.01])
def test_adam_first_step_moves_by_lr(g):
    w = np.array([1.0])
    state = AdamState.for_params([w])
    adam_update([w], [np.array([g])], state, lr=0.01)
    assert w[0] == pytest.approx(1.0 - 0.01 * np.sign(g), abs=1e-7)
    assert state.step == 1


def test_adam_converges_on_quadratic():
    w = np.array([0.0])
    state = AdamState.for_params([w])
    for _ in range(100):
        adam_update([w], [2.0 * (w - 3.0)], state, lr=0.1)
    assert abs(w[0] - 3.0) < 0.1


def test_adam_rejects_non_finite():
    w = np.array([0.0])
    with pytest.raises(NonFiniteError, match="non-finite gradient"):
        adam_update([w], [np.array([np.nan])], AdamState.for_params([w]), lr=0.1)


def test_adam_clipping_bounds_step():
    w = np.array([0.0, 0.0])
    state = AdamState.for_params([w])
    adam_update([w], [np.array([1e6, 0.0])], state, lr=0.1, clip_norm=10.0)
    assert np.all(np.isfinite(w))


def test_polyak_full_copy_and_midpoint():
    target = Mlp.zeros([2, 2])
    online = Mlp.zeros([2, 2])
    for p in online.params():
        p[...] = 2.0
    polyak_update(target, online, 0.5)
    assert all(np.all(p == 1.0) for p in target.params())
    polyak_update(target, online, 1.0)
    assert all(np.all(p == 2.0) for p in target.params())


def test_polyak_contracts_geometrically():
    rng = np.random.default_rng(0)
    target = Mlp.init([3, 4, 2], rng)
    online = Mlp.init([3, 4, 2], rng)
    gap0 = max(np.max(np.abs(t - o)) for t, o in zip(target.params(), online.params()))
    for _ in range(100):
        polyak_update(target, online, 0.2)
    gap = max(np.max(np.abs(t - o)) for t, o in zip(target.params(), online.params()))
    assert gap < 1e-6
    assert gap <= gap0 * 0.8 ** 100 * (1 + 1e-9) + 1e-15


def test_polyak_architecture_mismatch():
    with pytest.raises(ValueError):
        polyak_update(Mlp.zeros([2, 2]), Mlp.zeros([2, 3]), 0.5)


def test_determinism_bit_identical():
    def train(seed):
        rng = np.random.default_rng(seed)
        net = Mlp.init([4, 8, 2], rng)
        state = AdamState.for_params(net.params())
        x = rng.normal(size=(5, 4))
        for _ in range(20):
            adam_step(net, mlp_backward(net, x, mlp_forward(net, x)), state, lr=0.01)
        return net

    a, b = train(3), train(3)
    for p, q in zip(a.params(), b.params()):
        assert p.tobytes() == q.tobytes()


def test_checkpoint_round_trip(tmp_path):
    net = Mlp.init([3, 5, 2], np.random.default_rng(4))
    path = tmp_path / "net.json"
    net.save(path)
    back = Mlp.load(path)
    for p, q in zip(net.params(), back.params()):
        np.testing.assert_array_equal(p, q)
    state = AdamState.for_params(net.params())
    adam_step(net, mlp_backward(net, np.ones(3), np.ones(2)), state, lr=0.01)
    restored = AdamState.from_dict(state.to_dict(), net.params())
    assert restored.step == 1
    for a, b in zip(restored.m, state.m):
        np.testing.assert_array_equal(a, b)
