import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsnpe.ndcore import (AdamState, DenseNetwork, Layer, NonFiniteError, adam_step, backward,
                          clip_by_global_norm, forward)


def naive_forward(net, x):
    """Loop-based evaluation, independent of the vectorized implementation."""
    h = list(x)
    for i, layer in enumerate(net.layers):
        out = []
        for j in range(layer.n_out):
            s = layer.bias[j]
            for k in range(layer.n_in):
                s += h[k] * layer.weight[k, j]
            out.append(s)
        if i < len(net.layers) - 1:
            out = [np.tanh(v) if net.activation == "tanh" else max(v, 0.0) for v in out]
        h = out
    return np.array(h)


def fd_param_grads(net, x, adjoint, h=1e-5):
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = np.sum(adjoint * net.forward(x))
            p[idx] = old - h
            down = np.sum(adjoint * net.forward(x))
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))


def test_zero_weight_network_returns_last_bias():
    net = DenseNetwork([3, 5, 2], rng=np.random.default_rng(0))
    for layer in net.layers:
        layer.weight[...] = 0.0
    net.layers[-1].bias[...] = [1.5, -2.0]
    assert np.array_equal(forward(net, np.array([0.3, -4.0, 9.0])), [1.5, -2.0])


def test_identity_linear_layer():
    net = DenseNetwork.from_layers([Layer(np.eye(3), np.zeros(3))])
    v = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(net.forward(v), v)


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_forward_matches_loop_oracle(activation):
    rng = np.random.default_rng(1)
    net = DenseNetwork([4, 7, 6, 3], activation, rng)
    for layer in net.layers:
        layer.bias[...] = rng.normal(size=layer.bias.shape)
    x = rng.normal(size=4)
    assert np.allclose(net.forward(x), naive_forward(net, x), atol=1e-12)


def test_dimension_mismatch_raises():
    net = DenseNetwork([3, 4, 1])
    with pytest.raises(ValueError):
        net.forward(np.zeros(2))
    with pytest.raises(ValueError):
        net.backward(np.zeros(3), np.zeros(2))


def test_invalid_sizes_and_activation():
    with pytest.raises(ValueError):
        DenseNetwork([3])
    with pytest.raises(ValueError):
        DenseNetwork([3, 2], activation="sigmoid")


def test_single_linear_layer_weight_gradient_is_outer_product():
    net = DenseNetwork([3, 2], rng=np.random.default_rng(2))
    x = np.array([0.5, -1.0, 2.0])
    g = backward(net, x, np.ones(2))
    assert np.allclose(g.params[0], np.outer(x, np.ones(2)))
    assert np.allclose(g.params[1], np.ones(2))


def test_constant_network_has_zero_input_gradient():
    net = DenseNetwork([3, 4, 2], rng=np.random.default_rng(3))
    net.layers[0].weight[...] = 0.0
    g = net.backward(np.array([1.0, 2.0, 3.0]), np.array([1.0, -1.0]))
    assert np.array_equal(g.input, np.zeros(3))


def test_non_finite_adjoint_raises():
    net = DenseNetwork([2, 3, 1])
    with pytest.raises(NonFiniteError):
        net.backward(np.zeros(2), np.array([np.nan]))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("sizes,activation", [([3, 8, 8, 4], "tanh"), ([5, 10, 10, 1], "relu"),
                                              ([2, 6, 5], "tanh")])
def test_gradients_match_finite_differences(seed, sizes, activation):
    rng = np.random.default_rng(seed)
    net = DenseNetwork(sizes, activation, rng)
    for layer in net.layers:
        layer.bias[...] = rng.normal(scale=0.3, size=layer.bias.shape)
    x = rng.normal(size=(4, sizes[0]))
    adj = rng.normal(size=(4, sizes[-1]))
    g = net.backward(x, adj)
    for a, b in zip(g.params, fd_param_grads(net, x, adj)):
        assert a.shape == b.shape
        assert rel_err(a, b) < 1e-4
    # input gradient
    h = 1e-5
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd[idx] = (np.sum(adj * net.forward(xp)) - np.sum(adj * net.forward(xm))) / (2 * h)
    assert rel_err(g.input, fd) < 1e-4


def test_forward_and_backward_are_deterministic():
    a = DenseNetwork([3, 5, 2], rng=np.random.default_rng(7))
    b = DenseNetwork([3, 5, 2], rng=np.random.default_rng(7))
    x = np.random.default_rng(0).normal(size=(6, 3))
    adj = np.ones((6, 2))
    assert np.array_equal(a.forward(x), b.forward(x))
    for ga, gb in zip(a.backward(x, adj).params, b.backward(x, adj).params):
        assert np.array_equal(ga, gb)


def test_init_bounds_and_zero_bias():
    net = DenseNetwork([10, 20, 5], rng=np.random.default_rng(0))
    for layer in net.layers:
        limit = np.sqrt(6.0 / (layer.n_in + layer.n_out))
        assert np.all(np.abs(layer.weight) <= limit)
        assert np.array_equal(layer.bias, np.zeros(layer.n_out))


def test_serialization_round_trip(tmp_path):
    net = DenseNetwork([3, 4, 2], "relu", np.random.default_rng(5))
    path = tmp_path / "net.bin"
    net.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"NDCN"
    loaded = DenseNetwork.load(path)
    assert loaded.activation == "relu"
    x = np.random.default_rng(1).normal(size=(5, 3))
    assert np.array_equal(loaded.forward(x), net.forward(x))
    with pytest.raises(ValueError):
        DenseNetwork.from_bytes(b"XXXX" + raw[4:])


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, 2.0])]
    state = AdamState.for_params(p, lr=0.1)
    adam_step(p, [np.zeros(2)], state)
    assert np.array_equal(p[0], [1.0, 2.0])
    assert state.t == 1


def test_adam_first_step_is_lr_times_sign():
    p = [np.array([0.0])]
    state = AdamState.for_params(p, lr=0.1, beta1=0.9, beta2=0.999)
    adam_step(p, [np.array([1.0])], state)
    assert p[0][0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_converges_on_quadratic():
    w = [np.array([0.0])]
    state = AdamState.for_params(w, lr=0.05)
    for _ in range(2000):
        adam_step(w, [2.0 * (w[0] - 3.0)], state)
    assert abs(w[0][0] - 3.0) < 1e-2


def test_adam_refuses_non_finite_gradient():
    p = [np.array([1.0])]
    state = AdamState.for_params(p)
    with pytest.raises(NonFiniteError):
        adam_step(p, [np.array([np.inf])], state)
    assert p[0][0] == 1.0 and state.t == 0


def test_adam_shape_mismatch():
    p = [np.zeros(2)]
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(3)], AdamState.for_params(p))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8), st.floats(0.01, 10.0))
def test_clip_by_global_norm_bounds_norm(values, max_norm):
    grads = [np.array(values)]
    before = np.linalg.norm(values)
    clip_by_global_norm(grads, max_norm)
    after = np.linalg.norm(grads[0])
    assert after <= max_norm * (1 + 1e-12) + 1e-12
    if before <= max_norm:
        assert np.allclose(grads[0], values)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 5), st.integers(1, 5))
def test_adam_moments_stay_congruent(seed, a, b):
    rng = np.random.default_rng(seed)
    p = [rng.normal(size=(a, b)), rng.normal(size=b)]
    state = AdamState.for_params(p)
    for t in range(3):
        adam_step(p, [rng.normal(size=(a, b)), rng.normal(size=b)], state)
        assert state.t == t + 1
        assert all(m.shape == q.shape for m, q in zip(state.m, p))
