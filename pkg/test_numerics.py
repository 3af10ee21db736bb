#!/usr/bin/env python3
"""
Tests for the layer stack: conv/pool/linear forward and backward, the
finite-difference gradient oracle, loss, optimizer and checkpoints
"""
import os
import sys
import tempfile

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from errors import ConfigurationError, LoadError, UsageError
from numerics import (Conv2d, GlobalAvgPool, Linear, MaxPool2d, ParamSet, ReLU, Sequential, conv2d_forward,
                      global_avg_pool_backward, global_avg_pool_forward, l2_normalize, layer_backward,
                      linear_backward, linear_forward, load_checkpoint, max_pool_backward, max_pool_forward,
                      relu_backward, relu_forward, save_checkpoint, sgd_step, softmax_cross_entropy)


def naive_conv(x, w, b, stride, pad):
    """Six nested loops, float64"""
    x = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    batch, channels, height, width = x.shape
    filters, _, kh, kw = w.shape
    out_h = (height - kh) // stride + 1
    out_w = (width - kw) // stride + 1
    out = np.zeros((batch, filters, out_h, out_w))
    for n in range(batch):
        for f in range(filters):
            for i in range(out_h):
                for j in range(out_w):
                    total = float(b[f])
                    for c in range(channels):
                        for di in range(kh):
                            for dj in range(kw):
                                total += x[n, c, i * stride + di, j * stride + dj] * w[f, c, di, dj]
                    out[n, f, i, j] = total
    return out


def test_conv_identity_and_zero_kernel():
    """A 1x1 unit kernel copies its input; zero weights give the bias everywhere"""
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    out, _ = conv2d_forward(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    assert np.array_equal(out, x)

    x = np.random.default_rng(0).random((2, 3, 5, 5)).astype(np.float32)
    out, _ = conv2d_forward(x, np.zeros((4, 3, 3, 3), np.float32), np.full(4, 0.25, np.float32), pad=1)
    assert out.shape == (2, 4, 5, 5)
    assert np.all(out == np.float32(0.25))
    print("✓ Identity and zero kernel test passed")


def test_conv_matches_naive_loops():
    """50 random shape/stride/pad cases within 1e-5 absolute"""
    rng = np.random.default_rng(1234)
    for _ in range(50):
        kernel = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        side = int(rng.integers(kernel, 8))
        x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), side, side)).astype(np.float32)
        w = rng.standard_normal((int(rng.integers(1, 4)), x.shape[1], kernel, kernel)).astype(np.float32)
        b = rng.standard_normal(w.shape[0]).astype(np.float32)
        out, _ = conv2d_forward(x, w, b, stride=stride, pad=pad)
        expected = naive_conv(x, w, b, stride, pad)
        assert out.shape == expected.shape
        assert np.max(np.abs(out - expected)) <= 1e-5 * max(1.0, np.abs(expected).max())

    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    assert np.max(np.abs(conv2d_forward(x, w, b)[0] - naive_conv(x, w, b, 1, 0))) <= 1e-5
    print("✓ Naive conv oracle test passed")


def test_conv_shape_errors():
    x = np.zeros((1, 3, 4, 4), np.float32)
    with pytest.raises(ConfigurationError):
        conv2d_forward(x, np.zeros((2, 2, 3, 3), np.float32), np.zeros(2, np.float32))
    with pytest.raises(ConfigurationError):
        conv2d_forward(x, np.zeros((2, 3, 5, 5), np.float32), np.zeros(2, np.float32))
    with pytest.raises(ConfigurationError):
        conv2d_forward(x, np.zeros((2, 3, 3, 3), np.float32), np.zeros(2, np.float32), stride=0)


def test_relu_subgradient_at_zero():
    x = np.array([[-1.0, 0.0, 2.0]], dtype=np.float32)
    out, cache = relu_forward(x)
    assert np.array_equal(out, [[0.0, 0.0, 2.0]])
    assert np.array_equal(relu_backward(np.ones_like(x), cache), [[0.0, 0.0, 1.0]])


def test_max_pool_ties_route_to_first_index():
    x = np.ones((1, 1, 2, 2), dtype=np.float32)
    out, cache = max_pool_forward(x)
    assert out.shape == (1, 1, 1, 1)
    dx = max_pool_backward(np.full((1, 1, 1, 1), 3.0, np.float32), cache)
    assert np.array_equal(dx[0, 0], [[3.0, 0.0], [0.0, 0.0]])

    # odd trailing rows/columns are dropped and receive no gradient
    x = np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5)
    out, cache = max_pool_forward(x)
    assert np.array_equal(out[0, 0], [[6, 8], [16, 18]])
    dx = max_pool_backward(np.ones_like(out), cache)
    assert dx[0, 0, 4].sum() == 0 and dx[0, 0, :, 4].sum() == 0


def test_linear_bias_gradient_is_batch_sum():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 4)).astype(np.float32)
    w = rng.standard_normal((3, 4)).astype(np.float32)
    out, cache = linear_forward(x, w, np.zeros(3, np.float32))
    dout = rng.standard_normal(out.shape).astype(np.float32)
    _, _, db = linear_backward(dout, cache)
    assert np.allclose(db, dout.sum(axis=0))


def test_layer_backward_needs_its_cache():
    layer = ReLU("relu1")
    with pytest.raises(UsageError):
        layer_backward(layer, None, np.zeros((1, 1)))
    _, cache = ReLU("relu2").forward(np.zeros((1, 1), np.float32), ParamSet())
    with pytest.raises(UsageError):
        layer_backward(layer, cache, np.zeros((1, 1)))


def _tiny_network():
    return Sequential([Conv2d("conv1", 3, 4, 3), ReLU("relu1"), Conv2d("conv2", 4, 4, 3), ReLU("relu2"),
                       MaxPool2d("pool"), Linear("fc", 4 * 4 * 4, 3)])


def _loss(net, params, x, labels):
    out, caches = net.forward(x, params)
    return softmax_cross_entropy(out, labels)[0], caches


def _activation_pattern(caches):
    """ReLU masks and pool winners; finite differences are only valid when these do not change"""
    pattern = []
    for cache in caches:
        if cache.layer.startswith("relu"):
            pattern.append(cache.state > 0)
        elif cache.layer == "pool":
            pattern.append(cache.state[1])
    return pattern


def _same_pattern(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def test_gradient_oracle_on_tiny_networks():
    """Analytic float32 gradients against central differences on a float64 shadow, 20 networks"""
    step = 1e-3
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = _tiny_network()
        params = net.init_params(rng)
        x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
        labels = rng.integers(0, 3, size=4)

        out, caches = net.forward(x, params)
        _, dlogits = softmax_cross_entropy(out, labels)
        net.backward(dlogits, caches, params)

        shadow = params.copy(dtype=np.float64)
        x64 = x.astype(np.float64)
        _, base_caches = _loss(net, shadow, x64, labels)
        base_pattern = _activation_pattern(base_caches)
        for name in params:
            value = shadow.params[name]
            analytic, numeric = [], []
            for index in np.ndindex(value.shape):
                original = value[index]
                value[index] = original + step
                plus, plus_caches = _loss(net, shadow, x64, labels)
                value[index] = original - step
                minus, minus_caches = _loss(net, shadow, x64, labels)
                value[index] = original
                if not (_same_pattern(base_pattern, _activation_pattern(plus_caches))
                        and _same_pattern(base_pattern, _activation_pattern(minus_caches))):
                    continue
                analytic.append(params.grads[name][index])
                numeric.append((plus - minus) / (2 * step))
            assert len(analytic) >= 0.8 * value.size, f"too many kinks crossed for {name} (seed {seed})"
            analytic = np.array(analytic, dtype=np.float64)
            numeric = np.array(numeric)
            scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
            rel_error = np.linalg.norm(analytic - numeric) / scale
            assert rel_error <= 1e-3, f"{name} (seed {seed}): relative error {rel_error:.2e}"
    print("✓ Gradient oracle test passed")


def _strided_network():
    return Sequential([Conv2d("conv1", 3, 4, 3, stride=2, pad=1), ReLU("relu1"), Conv2d("conv2", 4, 5, 3),
                       ReLU("relu2"), GlobalAvgPool("gap"), Linear("fc", 5, 3)])


def _central_differences(net, shadow, x64, labels, array, base_pattern, step):
    """Numeric gradient of every entry of array (perturbed in place); None where a kink is crossed"""
    numeric = np.full(array.shape, np.nan)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + step
        plus, plus_caches = _loss(net, shadow, x64, labels)
        array[index] = original - step
        minus, minus_caches = _loss(net, shadow, x64, labels)
        array[index] = original
        if (_same_pattern(base_pattern, _activation_pattern(plus_caches))
                and _same_pattern(base_pattern, _activation_pattern(minus_caches))):
            numeric[index] = (plus - minus) / (2 * step)
    return numeric


def _relative_error(analytic, numeric):
    valid = ~np.isnan(numeric)
    assert valid.mean() >= 0.8
    analytic = np.asarray(analytic, dtype=np.float64)[valid]
    numeric = numeric[valid]
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / scale


def test_gradient_oracle_strided_conv_and_global_pool():
    """Stride-2 pad-1 conv, global average pooling and the input gradient against central differences"""
    step = 1e-3
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        net = _strided_network()
        params = net.init_params(rng)
        x = rng.standard_normal((4, 3, 9, 9)).astype(np.float32)
        labels = rng.integers(0, 3, size=4)

        out, caches = net.forward(x, params)
        _, dlogits = softmax_cross_entropy(out, labels)
        dx = net.backward(dlogits, caches, params)
        assert dx.shape == x.shape

        shadow = params.copy(dtype=np.float64)
        x64 = x.astype(np.float64)
        _, base_caches = _loss(net, shadow, x64, labels)
        base_pattern = _activation_pattern(base_caches)
        for name in params:
            numeric = _central_differences(net, shadow, x64, labels, shadow.params[name], base_pattern, step)
            rel_error = _relative_error(params.grads[name], numeric)
            assert rel_error <= 1e-3, f"{name} (seed {seed}): relative error {rel_error:.2e}"
        numeric = _central_differences(net, shadow, x64, labels, x64, base_pattern, step)
        rel_error = _relative_error(dx, numeric)
        assert rel_error <= 1e-3, f"input gradient (seed {seed}): relative error {rel_error:.2e}"


def test_global_avg_pool_backward_spreads_evenly():
    x = np.arange(2 * 3 * 4 * 5, dtype=np.float32).reshape(2, 3, 4, 5)
    out, cache = global_avg_pool_forward(x)
    assert np.allclose(out, x.mean(axis=(2, 3)))
    dout = np.arange(6, dtype=np.float32).reshape(2, 3)
    dx = global_avg_pool_backward(dout, cache)
    assert dx.shape == x.shape and dx.flags["C_CONTIGUOUS"]
    assert np.allclose(dx, dout[:, :, None, None] / 20)


def test_backward_without_input_gradient():
    rng = np.random.default_rng(5)
    net = _strided_network()
    params = net.init_params(rng)
    x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
    out, caches = net.forward(x, params)
    _, dlogits = softmax_cross_entropy(out, np.array([0, 2]))
    net.backward(dlogits, caches, params)
    full = {name: params.grads[name].copy() for name in params}
    params.zero_grad()
    assert net.backward(dlogits, caches, params, input_grad=False) is None
    for name in params:
        assert np.array_equal(params.grads[name], full[name])


def test_softmax_cross_entropy_values():
    loss, dlogits = softmax_cross_entropy(np.zeros((2, 5), np.float32), np.array([0, 3]))
    assert abs(loss - np.log(5)) < 1e-6
    assert np.allclose(dlogits.sum(axis=1), 0, atol=1e-7)

    saturated = np.zeros((1, 4), np.float32)
    saturated[0, 2] = 1e4
    loss, _ = softmax_cross_entropy(saturated, np.array([2]))
    assert 0 <= loss < 1e-6

    rng = np.random.default_rng(9)
    logits = rng.standard_normal((4, 3)).astype(np.float32)
    labels = np.array([0, 2, 1, 1])
    loss, dlogits = softmax_cross_entropy(logits, labels)
    l64 = logits.astype(np.float64)
    probs = np.exp(l64) / np.exp(l64).sum(axis=1, keepdims=True)
    assert abs(loss - np.mean(-np.log(probs[np.arange(4), labels]))) < 1e-6
    expected = probs.copy()
    expected[np.arange(4), labels] -= 1
    assert np.allclose(dlogits, expected / 4, atol=1e-6)
    assert loss > 0


def test_softmax_cross_entropy_rejects_bad_labels():
    with pytest.raises(UsageError):
        softmax_cross_entropy(np.zeros((2, 3), np.float32), np.array([0, 3]))
    with pytest.raises(UsageError):
        softmax_cross_entropy(np.zeros((2, 3), np.float32), np.array([0, -1]))


def test_l2_normalize():
    assert np.allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])
    unit = np.array([0.0, 1.0, 0.0])
    assert np.array_equal(l2_normalize(unit), unit)
    assert np.array_equal(l2_normalize(np.zeros(3)), np.zeros(3))
    rows = l2_normalize(np.array([[3.0, 4.0], [0.0, 0.0]]))
    assert np.allclose(rows, [[0.6, 0.8], [0.0, 0.0]])


def test_sgd_step():
    params = ParamSet({"w": np.array([1.0, -2.0])})
    params.grads["w"][...] = [0.5, 0.5]
    sgd_step(params, lr=0.0)
    assert np.array_equal(params["w"], np.array([1.0, -2.0], np.float32))
    assert not params.grads["w"].any()

    params.grads["w"][...] = [0.5, 0.5]
    sgd_step(params, lr=0.1)
    assert np.allclose(params["w"], [0.95, -2.05])

    params = ParamSet({"w": np.zeros(1)}, dtype=np.float64)
    for _ in range(2):
        params.grads["w"][...] = 1.0
        sgd_step(params, lr=0.1, momentum=0.9)
    assert np.isclose(params["w"][0], -0.1 * (1 + 1.9))

    params = ParamSet({"w": np.ones(1)}, dtype=np.float64)
    sgd_step(params, lr=0.1, weight_decay=0.5)
    assert np.isclose(params["w"][0], 1 - 0.1 * 0.5)


def test_sgd_dampening():
    """First step undampened, later gradients scaled by 1 - dampening, steady step lr * grad"""
    params = ParamSet({"w": np.zeros(1)}, dtype=np.float64)
    for _ in range(2):
        params.grads["w"][...] = 1.0
        sgd_step(params, lr=0.1, momentum=0.9, dampening=0.9)
    assert params.steps == 2
    assert np.isclose(params.velocity["w"][0], 0.9 + 0.1)
    assert np.isclose(params["w"][0], -0.1 * (1 + 1.0))

    for _ in range(300):
        params.grads["w"][...] = 1.0
        sgd_step(params, lr=0.1, momentum=0.9, dampening=0.9)
    assert np.isclose(params.velocity["w"][0], 1.0)

    undamped = ParamSet({"w": np.zeros(1)}, dtype=np.float64)
    for _ in range(300):
        undamped.grads["w"][...] = 1.0
        sgd_step(undamped, lr=0.1, momentum=0.9)
    assert np.isclose(undamped.velocity["w"][0], 10.0)
    assert undamped.copy().steps == 300


def test_param_set_shapes_and_checksum():
    params = ParamSet({"a": np.ones((2, 3))})
    with pytest.raises(ConfigurationError):
        params.add("a", np.ones(1))
    with pytest.raises(ConfigurationError):
        params.accumulate("a", np.ones(3))
    before = params.checksum()
    assert params.copy().checksum() == before
    params.params["a"][0, 0] = 2.0
    assert params.checksum() != before
    assert params.num_values() == 6


def test_checkpoint_round_trip():
    params = _tiny_network().init_params(np.random.default_rng(5))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "net.ckpt")
        save_checkpoint(params, path)
        with open(path, "rb") as f:
            assert f.read(8) == b"CLRCKPT1"
        loaded = load_checkpoint(path)
        assert list(loaded) == list(params)
        for name in params:
            assert np.array_equal(loaded[name], params[name])
        assert loaded.checksum() == params.checksum()

        bad = os.path.join(tmp, "bad.ckpt")
        with open(bad, "wb") as f:
            f.write(b"NOTACKPT")
        with pytest.raises(LoadError):
            load_checkpoint(bad)
        with pytest.raises(LoadError):
            load_checkpoint(os.path.join(tmp, "missing.ckpt"))


if __name__ == "__main__":
    print("Running numerics tests...\n")
    test_conv_identity_and_zero_kernel()
    test_conv_matches_naive_loops()
    test_gradient_oracle_on_tiny_networks()
    test_softmax_cross_entropy_values()
    test_sgd_step()
    test_checkpoint_round_trip()
    print("\n✓ All numerics tests passed")
