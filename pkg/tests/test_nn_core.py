import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import numeric_grad, rel_error
from splitguard.checkpoint import network_from_bytes, network_to_bytes
from splitguard.errors import ConfigurationError, TrainingError, UsageError
from splitguard.nn_core import (SGD, Adam, Conv2D, Dense, Flatten, GaussianHead, MaxPool2D, ReLU,
                                Sequential, kl_diag_gaussian, layer_backward, layer_forward,
                                reparameterize, softmax_confidence)


def test_dense_identity():
    layer = Dense(2, 2)
    layer.weight[...] = np.eye(2)
    np.testing.assert_array_equal(layer_forward(layer, [[3.0, -2.0]]), [[3.0, -2.0]])


def test_relu_forward_and_subgradient():
    np.testing.assert_array_equal(layer_forward(ReLU(), [[-1.0, 0.0, 2.0]]), [[0.0, 0.0, 2.0]])
    dx, grads = layer_backward(ReLU(), [[-1.0, 2.0]], [[5.0, 5.0]])
    np.testing.assert_array_equal(dx, [[0.0, 5.0]])
    assert grads == {}
    dx, _ = layer_backward(ReLU(), [[0.0]], [[1.0]])
    assert dx[0, 0] == 0.0


def test_conv_1x1_scales_input():
    conv = Conv2D(1, 1, 1, bias=False)
    conv.weight[...] = 2.0
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    np.testing.assert_array_equal(layer_forward(conv, x)[0, 0], [[2, 4], [6, 8]])


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(0)
    conv = Conv2D(2, 3, 3, stride=2, padding=1)
    conv.weight[...] = rng.normal(size=conv.weight.shape)
    conv.bias[...] = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 5, 6))
    y = conv.forward(x)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(y)
    for n in range(2):
        for o in range(3):
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    patch = xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    ref[n, o, i, j] = np.sum(patch * conv.weight[o]) + conv.bias[o]
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_dense_weight_grad_is_outer_product():
    layer = Dense(2, 2, bias=False)
    layer.weight[...] = [[1.0, 2.0], [3.0, 4.0]]
    x = np.array([[0.5, -1.5]])
    up = np.array([[2.0, -1.0]])
    _, grads = layer_backward(layer, x, up)
    np.testing.assert_allclose(grads["weight"], np.outer(up[0], x[0]))
    fd = numeric_grad(lambda: float(np.sum(layer.forward(x) * up)), layer.weight)
    assert rel_error(grads["weight"], fd) < 1e-8


def test_maxpool_routes_to_argmax_and_first_tie():
    x = np.array([[[[1.0, 5.0], [3.0, 2.0]]]])
    dx, _ = layer_backward(MaxPool2D(2), x, np.array([[[[7.0]]]]))
    np.testing.assert_array_equal(dx[0, 0], [[0, 7], [0, 0]])
    tie = np.ones((1, 1, 2, 2))
    dx, _ = layer_backward(MaxPool2D(2), tie, np.array([[[[1.0]]]]))
    np.testing.assert_array_equal(dx[0, 0], [[1, 0], [0, 0]])


def test_shape_mismatch_names_layer():
    with pytest.raises(ConfigurationError, match="dense.*expected input shape"):
        Dense(3, 2).forward(np.zeros((1, 4)))
    with pytest.raises(ConfigurationError, match="layer 1"):
        Sequential([Dense(4, 3), Dense(4, 2)], (4,))
    with pytest.raises(ConfigurationError):
        Dense(3, 2).backward(np.zeros((1, 3)), np.zeros((1, 3)))


def _random_layer(kind, rng):
    if kind == "dense":
        i, o = rng.integers(1, 9, size=2)
        layer, shape = Dense(i, o), (i,)
    elif kind == "conv2d":
        c, o, k = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
        s, p = rng.integers(1, 3), rng.integers(0, 2)
        h, w = rng.integers(k, 8, size=2)
        layer, shape = Conv2D(c, o, k, stride=s, padding=p), (c, h, w)
    elif kind == "maxpool2d":
        k = rng.integers(1, 4)
        layer, shape = MaxPool2D(k, rng.integers(1, 3)), (rng.integers(1, 4), *rng.integers(k, 8, size=2))
    elif kind == "relu":
        layer, shape = ReLU(), tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
    else:
        layer, shape = Flatten(), tuple(rng.integers(1, 5, size=3))
    for p in layer.params().values():
        p[...] = rng.normal(size=p.shape)
    return layer, shape


@pytest.mark.parametrize("kind", ["dense", "conv2d", "maxpool2d", "relu", "flatten"])
def test_layer_gradients_match_finite_differences(kind):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        layer, shape = _random_layer(kind, rng)
        x = rng.normal(size=(2,) + tuple(int(v) for v in shape))
        up = rng.normal(size=(2,) + layer.output_shape(x.shape[1:]))
        loss = lambda: float(np.sum(layer.forward(x) * up))
        dx, grads = layer.backward(x, up)
        assert rel_error(dx, numeric_grad(loss, x)) < 1e-4, (kind, seed)
        for name, p in layer.params().items():
            assert rel_error(grads[name], numeric_grad(loss, p)) < 1e-4, (kind, seed, name)


def test_forward_backward_leaves_parameters_alone():
    rng = np.random.default_rng(1)
    net = Sequential([Conv2D(1, 2, 3), ReLU(), Flatten(), Dense(8, 3)], (1, 4, 4)).init_params(rng)
    before = {k: v.copy() for k, v in net.parameters().items()}
    acts = net.forward_trace(rng.normal(size=(3, 1, 4, 4)))
    net.backward(acts, np.ones((3, 3)))
    for k, v in net.parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_sgd_step():
    params = {"w": np.array([1.0])}
    SGD(lr=0.1).step(params, {"w": 2.0 * params["w"]})
    assert params["w"][0] == pytest.approx(0.8)


def test_zero_gradient_is_a_fixed_point():
    for opt in (SGD(lr=0.1), Adam(lr=0.1)):
        params = {"w": np.array([1.5, -2.0])}
        opt.step(params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.5, -2.0])


@pytest.mark.parametrize("g", [1e-3, 0.5, 40.0, -7.0])
def test_adam_first_step_has_magnitude_lr(g):
    params = {"w": np.array([0.0])}
    Adam(lr=0.01).step(params, {"w": np.array([g])})
    # m_hat = g, v_hat = g^2  =>  step = lr * |g| / (|g| + eps)
    assert abs(params["w"][0]) == pytest.approx(0.01 * abs(g) / (abs(g) + 1e-8), rel=1e-12)
    assert abs(params["w"][0]) == pytest.approx(0.01, rel=1e-5)


def test_non_finite_gradient_names_parameter():
    with pytest.raises(TrainingError, match="'w'"):
        SGD(lr=0.1).step({"w": np.zeros(1)}, {"w": np.array([np.nan])})
    with pytest.raises(ConfigurationError):
        Adam(lr=0.0)


def test_optimizer_trajectories_are_deterministic():
    def run():
        rng = np.random.default_rng(3)
        net = Sequential([Dense(4, 5), ReLU(), Dense(5, 2)], (4,)).init_params(rng)
        opt = Adam(lr=0.05)
        params = net.parameters()
        x = rng.normal(size=(8, 4))
        for _ in range(5):
            acts = net.forward_trace(x)
            _, grads = net.backward(acts, acts[-1])
            opt.step(params, grads)
        return network_to_bytes(net)
    assert run() == run()


def test_reparameterize():
    head = GaussianHead(np.array([1.0, -2.0]), np.array([0.3, 0.1]))
    np.testing.assert_array_equal(reparameterize(head, np.zeros(2)), head.mu)
    tiny = GaussianHead(np.array([1.0]), np.array([-700.0]))
    assert reparameterize(tiny, np.array([3.0]))[0] == pytest.approx(1.0)
    assert reparameterize(GaussianHead([0.0], [0.0]), np.array([0.5]))[0] == 0.5
    with pytest.raises(UsageError):
        reparameterize(head, np.zeros(3))


def test_kl_closed_forms():
    assert kl_diag_gaussian(GaussianHead([0.0, 0.0], [0.0, 0.0])) == 0.0
    assert kl_diag_gaussian(GaussianHead([1.0], [0.0])) == pytest.approx(0.5)
    assert kl_diag_gaussian(GaussianHead([0.0], [1.0])) == pytest.approx(0.5 * (math.e ** 2 - 3))


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=8))
def test_kl_nonnegative(pairs):
    mu, ls = np.array(pairs).T
    kl = kl_diag_gaussian(GaussianHead(mu, ls))
    assert kl >= 0
    if np.all(mu == 0) and np.all(ls == 0):
        assert kl == 0


def test_softmax_confidence_examples():
    assert softmax_confidence([0.0, 0.0]) == (0, 0.5)
    k, c = softmax_confidence([math.log(2), 0.0])
    assert k == 0 and c == pytest.approx(2 / 3)
    k, c = softmax_confidence([1000.0, 0.0])
    assert k == 0 and c == pytest.approx(1.0) and math.isfinite(c)
    with pytest.raises(UsageError):
        softmax_confidence([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10), st.floats(-1e3, 1e3))
def test_softmax_shift_invariance(logits, shift):
    k1, c1 = softmax_confidence(logits)
    k2, c2 = softmax_confidence(np.array(logits) + shift)
    assert k1 == k2
    assert abs(c1 - c2) <= 1e-12


def test_network_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    net = Sequential([Conv2D(3, 4, 3, padding=1), ReLU(), MaxPool2D(2), Flatten(), Dense(64, 3)],
                     (3, 8, 8)).init_params(rng)
    blob = network_to_bytes(net)
    assert blob[:4] == b"SSNN"
    back = network_from_bytes(blob)
    assert network_to_bytes(back) == blob
    x = rng.normal(size=(2, 3, 8, 8))
    np.testing.assert_array_equal(back.forward(x), net.forward(x))
