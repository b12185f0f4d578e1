import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from connflow.errors import ConfigError, DimensionError, InputError, StateError
from connflow.nn import (
    GradientSet,
    LayerSpec,
    Network,
    backward,
    forward,
    init_network,
    loss_ce,
    sgd_step,
)
from connflow.theory import LossOracle, numerical_grad

from conftest import max_rel_err, random_net


def test_identity_layer_returns_input():
    net = Network([LayerSpec(3, 3, "identity")], [np.eye(3)])
    x = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 4.0]])
    logits, trace = forward(net, x)
    np.testing.assert_array_equal(logits, x)
    assert len(trace) == 1


def test_zero_weights_relu_trace_is_zero():
    net = init_network([4, 5, 3, 2], "relu", "identity", seed=0)
    for w in net.weights:
        w[:] = 0.0
    _, trace = forward(net, np.random.default_rng(0).standard_normal((6, 4)))
    assert all(np.all(a == 0.0) for a in trace.acts)


def test_two_layer_tanh_matches_hand_arithmetic():
    w1 = [[0.5, -1.0], [2.0, 0.25]]
    w2 = [[1.0, -1.0], [0.3, 0.7]]
    x = [1.0, 2.0]
    hidden = [math.tanh(sum(w1[i][j] * x[j] for j in range(2))) for i in range(2)]
    expected = [sum(w2[i][j] * hidden[j] for j in range(2)) for i in range(2)]
    # frozen from the loops above: tanh(-1.5), tanh(2.5)
    assert hidden == pytest.approx([-0.9051482536448664, 0.9866142981514303], abs=1e-15)
    net = Network(
        [LayerSpec(2, 2, "tanh"), LayerSpec(2, 2, "identity")],
        [np.array(w1), np.array(w2)],
    )
    logits, trace = forward(net, np.array([x]))
    np.testing.assert_allclose(logits[0], expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(trace.acts[0][0], hidden, rtol=0, atol=1e-15)


def test_softmax_output_exposes_raw_logits():
    net = init_network([3, 4], "tanh", "softmax_output", seed=1)
    x = np.ones((2, 3))
    logits, trace = forward(net, x)
    np.testing.assert_array_equal(logits, x @ net.weights[0].T)
    np.testing.assert_allclose(trace.acts[-1].sum(axis=1), 1.0)


def test_forward_rejects_wrong_width():
    net = init_network([3, 2], seed=0)
    with pytest.raises(DimensionError):
        forward(net, np.ones((2, 4)))


def test_softmax_only_on_last_layer():
    with pytest.raises(ConfigError):
        Network(
            [LayerSpec(2, 2, "softmax_output"), LayerSpec(2, 2, "identity")],
            [np.eye(2), np.eye(2)],
        )


def test_dims_must_chain():
    with pytest.raises(DimensionError):
        Network([LayerSpec(2, 3), LayerSpec(4, 2)], [np.zeros((3, 2)), np.zeros((2, 4))])


def test_no_biases_by_default():
    net = init_network([3, 4, 2], seed=0)
    assert not net.bias_enabled and net.biases is None
    assert net.num_params == 3 * 4 + 4 * 2


def test_glorot_bounds_and_determinism():
    a = init_network([30, 20, 10], seed=5)
    b = init_network([30, 20, 10], seed=5)
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)
    assert np.all(np.abs(a.weights[0]) <= math.sqrt(6 / 50))


def test_uniform_logits_loss_is_log_c():
    for c in (2, 3, 10):
        loss, _ = loss_ce(np.zeros((4, c)), [0, 1, 1, 0])
        assert loss == pytest.approx(math.log(c), abs=1e-15)


def test_peaked_logits_loss_vanishes():
    logits = np.array([[0.0, 200.0, 0.0]])
    loss, grad = loss_ce(logits, [1])
    assert loss < 1e-80
    assert np.max(np.abs(grad)) < 1e-80


def test_loss_batch_of_two_matches_scalar_oracle():
    logits = [[1.0, 2.0, 3.0], [0.5, 0.5, -1.0]]
    labels = [2, 0]

    def nll(row, y):
        return -(row[y] - math.log(sum(math.exp(v) for v in row)))

    expected = (nll(logits[0], 2) + nll(logits[1], 0)) / 2
    assert expected == pytest.approx(0.6032610746430529, abs=1e-15)
    loss, grad = loss_ce(np.array(logits), labels)
    assert loss == pytest.approx(expected, abs=1e-15)
    # softmax - onehot over batch size, row 0
    p0 = [math.exp(v) / sum(math.exp(u) for u in logits[0]) for v in logits[0]]
    np.testing.assert_allclose(grad[0], np.array([p0[0], p0[1], p0[2] - 1]) / 2, atol=1e-15)


def test_loss_rejects_out_of_range_label():
    with pytest.raises(InputError):
        loss_ce(np.zeros((2, 3)), [0, 3])


def test_zero_logit_grad_gives_zero_gradients(tiny_net):
    x = np.random.default_rng(0).standard_normal((5, 8))
    logits, trace = forward(tiny_net, x)
    grads = backward(tiny_net, trace, np.zeros_like(logits))
    assert all(np.all(g == 0) for g in grads.weights)


def test_single_linear_layer_gradient_is_outer_product(rng):
    w = rng.standard_normal((3, 4))
    net = Network([LayerSpec(4, 3, "identity")], [w])
    x = rng.standard_normal((6, 4))
    target = rng.standard_normal((6, 3))
    logits, trace = forward(net, x)
    delta = (logits - target) / len(x)  # gradient of 0.5*mean ||xW^T - t||^2
    grads = backward(net, trace, delta)
    np.testing.assert_allclose(grads.weights[0], delta.T @ x, atol=1e-15)


def test_backward_rejects_foreign_trace(tiny_net):
    other = init_network([8, 5, 3], seed=0)
    _, trace = forward(other, np.ones((2, 8)))
    with pytest.raises(StateError):
        backward(tiny_net, trace, np.zeros((2, 3)))


def test_backward_matches_central_differences(rng):
    for _ in range(5):
        net = random_net(rng)
        x = rng.standard_normal((7, net.layers[0].in_dim))
        y = rng.integers(0, net.layers[-1].out_dim, size=7)
        oracle = LossOracle(net, x, y)
        w = net.to_vector()
        assert max_rel_err(oracle.grad(w), numerical_grad(oracle, w, 1e-6)) < 1e-6


def test_backward_with_biases(rng):
    net = init_network([4, 6, 3], "tanh", seed=2, bias=True)
    net.biases[0][:] = rng.standard_normal(6)
    x = rng.standard_normal((5, 4))
    y = rng.integers(0, 3, size=5)
    oracle = LossOracle(net, x, y)
    w = net.to_vector()
    assert max_rel_err(oracle.grad(w), numerical_grad(oracle, w, 1e-6)) < 1e-6


def test_sgd_all_frozen_is_noop(tiny_net):
    before = [w.copy() for w in tiny_net.weights]
    grads = GradientSet([np.ones_like(w) for w in tiny_net.weights])
    sgd_step(tiny_net, grads, 0.5, [np.zeros(w.shape, bool) for w in tiny_net.weights])
    for a, b in zip(before, tiny_net.weights):
        assert a.tobytes() == b.tobytes()


def test_sgd_lr_one_with_g_equal_w_zeroes_net(tiny_net):
    grads = GradientSet([w.copy() for w in tiny_net.weights])
    sgd_step(tiny_net, grads, 1.0)
    assert all(np.all(w == 0.0) for w in tiny_net.weights)


def test_sgd_mixed_mask_elementwise():
    w = np.arange(9, dtype=float).reshape(3, 3)
    g = np.full((3, 3), 2.0)
    mask = np.array([[1, 0, 1], [0, 0, 1], [1, 1, 0]], dtype=bool)
    net = Network([LayerSpec(3, 3, "identity")], [w.copy()])
    sgd_step(net, GradientSet([g]), 0.25, [mask])
    for i in range(3):
        for j in range(3):
            expected = w[i, j] - 0.5 if mask[i, j] else w[i, j]
            assert net.weights[0][i, j] == expected


def test_sgd_rejects_nonpositive_lr(tiny_net):
    grads = GradientSet([np.zeros_like(w) for w in tiny_net.weights])
    with pytest.raises(ConfigError):
        sgd_step(tiny_net, grads, 0.0)


def test_frozen_coordinates_survive_nan_gradients(tiny_net):
    mask = [np.zeros(w.shape, bool) for w in tiny_net.weights]
    before = tiny_net.weights[0].copy()
    grads = GradientSet([np.full(w.shape, np.nan) for w in tiny_net.weights])
    sgd_step(tiny_net, grads, 0.1, mask)
    assert before.tobytes() == tiny_net.weights[0].tobytes()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), steps=st.integers(1, 8))
def test_frozen_invariance_property(seed, steps):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    masks = [rng.random(w.shape) < 0.5 for w in net.weights]
    frozen_before = [w[~m].copy() for w, m in zip(net.weights, masks)]
    for _ in range(steps):
        x = rng.standard_normal((4, net.layers[0].in_dim))
        y = rng.integers(0, net.layers[-1].out_dim, size=4)
        logits, trace = forward(net, x)
        _, g = loss_ce(logits, y)
        sgd_step(net, backward(net, trace, g), 0.3, masks)
    for w, m, before in zip(net.weights, masks, frozen_before):
        assert w[~m].tobytes() == before.tobytes()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), rows=st.integers(1, 9))
def test_forward_is_batch_decomposable(seed, rows):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    x = rng.standard_normal((rows, net.layers[0].in_dim))
    logits, _ = forward(net, x)
    for i in range(rows):
        single, _ = forward(net, x[i])
        np.testing.assert_allclose(single[0], logits[i], rtol=1e-12, atol=1e-14)


def test_training_is_deterministic(rng):
    def train(seed):
        net = init_network([5, 7, 3], "tanh", seed=seed)
        r = np.random.default_rng(seed)
        for _ in range(20):
            x = r.standard_normal((8, 5))
            y = r.integers(0, 3, size=8)
            logits, trace = forward(net, x)
            _, g = loss_ce(logits, y)
            sgd_step(net, backward(net, trace, g), 0.1)
        return net

    a, b = train(11), train(11)
    for wa, wb in zip(a.weights, b.weights):
        assert wa.tobytes() == wb.tobytes()


def test_vector_roundtrip(tiny_net):
    v = tiny_net.to_vector()
    again = tiny_net.with_vector(v)
    for a, b in zip(tiny_net.weights, again.weights):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(DimensionError):
        tiny_net.with_vector(v[:-1])
