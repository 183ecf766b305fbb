import io

import numpy as np
import pytest

from diffusec.errors import ConfigError, DivergenceError, ShapeError
from diffusec.nn import (DenseLayer, DenseNet, apply_update, backprop,
                         build_net, clone_net, forward, make_optimizer,
                         read_net, write_net)
from diffusec.tensor import make_rng

from _oracles import fd_param_grad, probe_coordinates


def linear_net(w, b):
    return DenseNet([DenseLayer(np.asarray(w, dtype=np.float32),
                                np.asarray(b, dtype=np.float32), "linear")])


def test_forward_single_linear_layer():
    net = linear_net([[2.0]], [1.0])
    assert forward(net, np.array([3.0], dtype=np.float32)) == pytest.approx([7.0])


def test_forward_relu():
    net = DenseNet([DenseLayer(np.eye(2, dtype=np.float32),
                               np.zeros(2, dtype=np.float32), "relu")])
    out = forward(net, np.array([-1.0, 2.0], dtype=np.float32))
    assert np.array_equal(out, np.array([0.0, 2.0], dtype=np.float32))


def test_tanh_output_is_bounded():
    rng = make_rng(4)
    net = build_net([5, 8, 3], ["relu", "tanh"], rng)
    for _ in range(50):
        out = forward(net, rng.normal(0, 10, size=5).astype(np.float32))
        assert np.all(np.abs(out) < 1.0)


def test_forward_rejects_dim_mismatch():
    net = build_net([4, 2], ["linear"], make_rng(0))
    with pytest.raises(ShapeError):
        forward(net, np.zeros(5, dtype=np.float32))


def test_backprop_matches_closed_form_linear_quadratic():
    w = np.array([[2.0, 1.0], [0.5, -1.0]], dtype=np.float32)
    net = linear_net(w, [0.0, 0.0])
    x = np.array([0.3, -0.7], dtype=np.float32)
    y = np.array([1.0, 0.2], dtype=np.float32)
    residual = forward(net, x) - y
    grads = backprop(net, x, 2.0 * residual)  # loss = ||Wx - y||^2
    assert np.allclose(grads.wrt_input, 2.0 * w.T @ (w @ x - y), atol=1e-6)
    assert np.allclose(grads.weights[0], np.outer(2.0 * residual, x), atol=1e-6)


def test_backprop_matches_central_differences():
    rng = make_rng(21)
    net = build_net([6, 9, 4], ["relu", "tanh"], rng)
    x = rng.random((5, 6)).astype(np.float32)
    gout = rng.normal(size=(5, 4)).astype(np.float32)
    grads = backprop(net, x, gout)
    for layer, which, idx in probe_coordinates(net, 120, rng):
        fd = fd_param_grad(net, x, gout, layer, which, idx, h=1e-3)
        got = grads.weights[layer][idx] if which == "weight" else grads.biases[layer][idx]
        assert got == pytest.approx(fd, rel=1e-3, abs=1e-5)


def test_backprop_zero_output_grad_gives_zero_grads():
    rng = make_rng(2)
    net = build_net([3, 4, 2], ["relu", "linear"], rng)
    x = rng.random((2, 3)).astype(np.float32)
    grads = backprop(net, x, np.zeros((2, 2), dtype=np.float32))
    assert all(np.all(g == 0) for g in grads.weights + grads.biases)
    assert np.all(grads.wrt_input == 0)


def test_sgd_update_values():
    net = linear_net([[1.0]], [0.0])
    opt = make_optimizer(net, "sgd", learning_rate=0.1)
    grads = backprop(net, np.array([1.0], dtype=np.float32),
                     np.array([0.5], dtype=np.float32))
    apply_update(net, grads, opt)
    assert net.layers[0].weight[0, 0] == pytest.approx(0.95)


def test_zero_gradient_leaves_parameters_unchanged():
    rng = make_rng(8)
    for kind in ("sgd", "adam"):
        net = build_net([3, 3], ["linear"], rng)
        before = [p.copy() for p in net.parameters()]
        opt = make_optimizer(net, kind, 0.1)
        grads = backprop(net, np.zeros(3, dtype=np.float32),
                         np.zeros(3, dtype=np.float32))
        apply_update(net, grads, opt)
        for p, b in zip(net.parameters(), before):
            assert np.array_equal(p, b)


def test_adam_first_step_magnitude_is_learning_rate():
    # bias-corrected first step with unit gradients moves each parameter by
    # lr * 1 / (1 + eps)
    net = build_net([2, 3], ["linear"], make_rng(5))
    before = [p.copy() for p in net.parameters()]
    opt = make_optimizer(net, "adam", learning_rate=1e-2)
    grads = backprop(net, np.ones(2, dtype=np.float32), np.ones(3, dtype=np.float32))
    for g in grads.weights + grads.biases:
        g[...] = 1.0
    apply_update(net, grads, opt)
    for p, b in zip(net.parameters(), before):
        assert np.allclose(np.abs(p - b), 1e-2, rtol=1e-5)


def test_non_finite_gradient_raises():
    net = build_net([2, 2], ["linear"], make_rng(1))
    opt = make_optimizer(net, "sgd", 0.1)
    grads = backprop(net, np.ones(2, dtype=np.float32), np.ones(2, dtype=np.float32))
    grads.weights[0][0, 0] = np.nan
    with pytest.raises(DivergenceError):
        apply_update(net, grads, opt)


def test_sgd_descends_a_quadratic_monotonically():
    rng = make_rng(12)
    net = build_net([4, 3], ["linear"], rng)
    x = rng.random((8, 4)).astype(np.float32)
    y = rng.random((8, 3)).astype(np.float32)
    opt = make_optimizer(net, "sgd", learning_rate=0.05)
    losses = []
    for _ in range(200):
        out = forward(net, x)
        diff = out - y
        losses.append(float(np.mean(diff ** 2)))
        apply_update(net, backprop(net, x, (2.0 / diff.size) * diff), opt)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_is_deterministic_for_a_fixed_seed():
    def run():
        rng = make_rng(99)
        net = build_net([4, 6, 2], ["relu", "linear"], rng)
        opt = make_optimizer(net, "adam", 1e-3)
        for _ in range(20):
            x = rng.random((4, 4)).astype(np.float32)
            gout = rng.normal(size=(4, 2)).astype(np.float32)
            apply_update(net, backprop(net, x, gout), opt)
        return [p.copy() for p in net.parameters()]

    first, second = run(), run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_build_net_validation():
    with pytest.raises(ConfigError):
        build_net([4], [], make_rng(0))
    with pytest.raises(ConfigError):
        build_net([4, 2], ["relu", "tanh"], make_rng(0))
    with pytest.raises(ConfigError):
        DenseLayer(np.zeros((2, 2), dtype=np.float32),
                   np.zeros(2, dtype=np.float32), "softplus")


def test_dnet_round_trip():
    rng = make_rng(6)
    net = build_net([5, 7, 2], ["relu", "tanh"], rng)
    buf = io.BytesIO()
    write_net(buf, net)
    buf.seek(0)
    back = read_net(buf)
    assert len(back.layers) == len(net.layers)
    for a, b in zip(net.layers, back.layers):
        assert a.activation == b.activation
        assert np.array_equal(a.weight, b.weight)
        assert np.array_equal(a.bias, b.bias)
    with pytest.raises(ShapeError):
        read_net(io.BytesIO(b"QQQQ\x01\x02"))


def test_clone_net_is_independent():
    net = build_net([3, 3], ["linear"], make_rng(3))
    twin = clone_net(net)
    twin.layers[0].weight += 1.0
    assert not np.array_equal(net.layers[0].weight, twin.layers[0].weight)
