import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqdp import autodiff as ad
from eqdp.autodiff import NoTape, Parameter, ShapeMismatch


def conv_loop(x, k, pad):
    b, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    out = np.zeros((b, o, ho, wo))
    for n in range(b):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    out[n, oc, i, j] = np.sum(xp[n, :, i:i + kh, j:j + kw] * k[oc])
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    k = np.eye(3)[:, :, None, None]
    np.testing.assert_array_equal(ad.conv2d(ad.batch(x), ad.as_tensor(k)).data, x)


def test_conv_impulse_response_is_flipped_kernel():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    out = ad.conv2d(ad.batch(x), ad.as_tensor(k), 1, "zero").data
    np.testing.assert_array_equal(out[0, 0, 1:4, 1:4], k[0, 0, ::-1, ::-1])


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, k = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    np.testing.assert_allclose(ad.conv2d(ad.batch(x), ad.as_tensor(k), 1).data, conv_loop(x, k, 1), atol=1e-12)
    np.testing.assert_allclose(ad.conv2d(ad.batch(x), ad.as_tensor(k), 0, "none").data, conv_loop(x, k, 0),
                               atol=1e-12)


def test_conv_circular_padding_wraps():
    rng = np.random.default_rng(2)
    x, k = rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 3, 3))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="wrap")
    np.testing.assert_allclose(ad.conv2d(ad.batch(x), ad.as_tensor(k), 1, "circular").data,
                               conv_loop(xp, k, 0), atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.conv2d(ad.batch(np.zeros((1, 2, 4, 4))), ad.as_tensor(np.zeros((1, 3, 3, 3))), 1)


def test_elementwise_examples():
    np.testing.assert_array_equal(ad.relu(ad.as_tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])
    assert ad.mish(ad.as_tensor(np.array([0.0]))).data[0] == 0.0
    assert ad.mean(ad.as_tensor(np.ones(4))).data == 1.0
    x = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(ad.mish(ad.as_tensor(x)).data, x * np.tanh(np.log1p(np.exp(x))), atol=1e-14)


def test_pooling_examples():
    const = np.full((1, 2, 4, 4), 3.5)
    np.testing.assert_array_equal(ad.max_pool2d(ad.batch(const)).data, np.full((1, 2, 2, 2), 3.5))
    peak = np.zeros((1, 1, 4, 4))
    peak[0, 0, 1, 2] = 9.0
    assert ad.max_pool2d(ad.batch(peak)).data[0, 0, 0, 1] == 9.0
    x = np.random.default_rng(3).standard_normal((2, 3, 6, 6))
    loop = np.array([[[[x[b, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(3)] for i in range(3)]
                      for c in range(3)] for b in range(2)])
    np.testing.assert_array_equal(ad.max_pool2d(ad.batch(x)).data, loop)
    np.testing.assert_allclose(ad.global_avg_pool(ad.batch(x)).data, x.mean(axis=(2, 3)), atol=1e-15)
    with pytest.raises(ShapeMismatch):
        ad.max_pool2d(ad.batch(np.zeros((1, 1, 5, 5))))


def test_max_pool_tie_routes_to_first_index():
    x = np.ones((1, 1, 2, 2))
    p = Parameter(np.zeros(1))
    loss = ad.sum(ad.max_pool2d(ad.add(ad.batch(x), p)), axis=(1, 2, 3))
    leaves = ad.backward(loss)
    assert p in leaves
    xt = ad.batch(x)
    xt.requires_grad = True
    ad.backward(ad.sum(ad.max_pool2d(xt), axis=(1, 2, 3)))
    np.testing.assert_array_equal(xt.grad[0, 0], [[1, 0], [0, 0]])


def test_linear_examples():
    x = np.random.default_rng(4).standard_normal((3, 4))
    np.testing.assert_array_equal(ad.linear(ad.batch(x), ad.as_tensor(np.eye(4)), ad.as_tensor(np.zeros(4))).data, x)
    bias = np.arange(2.0)
    np.testing.assert_array_equal(ad.linear(ad.batch(x), ad.as_tensor(np.zeros((4, 2))), ad.as_tensor(bias)).data,
                                  np.tile(bias, (3, 1)))
    w = np.random.default_rng(5).standard_normal((4, 2))
    np.testing.assert_allclose(ad.linear(ad.batch(x), ad.as_tensor(w), ad.as_tensor(bias)).data, x @ w + bias,
                               atol=1e-14)


def test_cross_entropy_examples():
    logits = np.eye(3) * 1e6
    assert np.all(ad.softmax_cross_entropy(ad.batch(logits), [0, 1, 2]).data < 1e-12)
    out = ad.softmax_cross_entropy(ad.batch(np.zeros((2, 10))), [3, 7]).data
    np.testing.assert_allclose(out, [math.log(10)] * 2, atol=1e-15)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(6)
    z = rng.standard_normal((4, 5))
    y = np.array([0, 4, 2, 2])
    t = ad.batch(z)
    t.requires_grad = True
    ad.backward(ad.softmax_cross_entropy(t, y))
    expect = ad.softmax(z)
    expect[np.arange(4), y] -= 1
    np.testing.assert_allclose(t.grad, expect, atol=1e-14)
    h = 1e-6
    for i, j in [(0, 0), (1, 3), (3, 2)]:
        zp, zm = z.copy(), z.copy()
        zp[i, j] += h
        zm[i, j] -= h
        num = (ad.softmax_cross_entropy(ad.batch(zp), y).data[i] - ad.softmax_cross_entropy(ad.batch(zm), y).data[i])
        assert abs(num / (2 * h) - expect[i, j]) < 1e-8


def _tiny_net(rng):
    k = Parameter(rng.standard_normal((2, 1, 3, 3)) * 0.5, "k")
    w = Parameter(rng.standard_normal((2, 3)) * 0.5, "w")
    b = Parameter(rng.standard_normal(3) * 0.1, "b")

    def loss(x, y):
        h = ad.mish(ad.conv2d(ad.batch(x), k, 1))
        h = ad.global_avg_pool(ad.max_pool2d(h))
        return ad.softmax_cross_entropy(ad.linear(h, w, b), y)

    return [k, w, b], loss


def test_finite_differences_linear_and_conv():
    rng = np.random.default_rng(7)
    w = Parameter(rng.standard_normal((4, 3)))
    x = rng.standard_normal((5, 4))
    err = ad.finite_difference_check(lambda: ad.sum(ad.linear(ad.batch(x), w), axis=1), [w], max_coords=None)
    assert err < 1e-9
    params, loss = _tiny_net(rng)
    x = rng.standard_normal((3, 1, 4, 4))
    y = np.array([0, 2, 1])
    assert ad.finite_difference_check(lambda: loss(x, y), params, max_coords=None) < 1e-6


def test_per_sample_matches_singletons():
    rng = np.random.default_rng(8)
    params, loss = _tiny_net(rng)
    x = rng.standard_normal((4, 1, 4, 4))
    y = np.array([0, 1, 2, 1])
    ad.per_sample_gradients(loss(x, y), params)
    per = [p.per_sample_grad.copy() for p in params]
    agg = [p.grad.copy() for p in params]
    for i in range(4):
        ad.per_sample_gradients(loss(x[i:i + 1], y[i:i + 1]), params)
        for p, ps in zip(params, per):
            np.testing.assert_allclose(ps[i], p.grad, atol=1e-12)
    for ps, g in zip(per, agg):
        np.testing.assert_allclose(ps.sum(axis=0), g, atol=1e-12)


def test_identical_samples_identical_grads():
    rng = np.random.default_rng(9)
    params, loss = _tiny_net(rng)
    x = np.repeat(rng.standard_normal((1, 1, 4, 4)), 3, axis=0)
    ad.per_sample_gradients(loss(x, np.array([1, 1, 1])), params)
    for p in params:
        assert np.array_equal(p.per_sample_grad[0], p.per_sample_grad[2])


@settings(max_examples=15, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_linearity(a, b):
    rng = np.random.default_rng(10)
    params, loss = _tiny_net(rng)
    x = rng.standard_normal((2, 1, 4, 4))
    y1, y2 = np.array([0, 1]), np.array([2, 0])
    ad.per_sample_gradients(loss(x, y1), params)
    g1 = [p.grad.copy() for p in params]
    ad.per_sample_gradients(loss(x, y2), params)
    g2 = [p.grad.copy() for p in params]
    ad.per_sample_gradients(ad.add(ad.scale(loss(x, y1), a), ad.scale(loss(x, y2), b)), params)
    for p, u, v in zip(params, g1, g2):
        np.testing.assert_allclose(p.grad, a * u + b * v, atol=1e-10)


def test_backward_twice_raises():
    rng = np.random.default_rng(11)
    params, loss = _tiny_net(rng)
    out = loss(rng.standard_normal((1, 1, 4, 4)), np.array([0]))
    ad.backward(out)
    with pytest.raises(NoTape):
        ad.backward(out)
    with pytest.raises(NoTape):
        ad.backward(ad.batch(np.zeros(3)))


def test_determinism():
    def run():
        rng = np.random.default_rng(12)
        params, loss = _tiny_net(rng)
        out = loss(rng.standard_normal((2, 1, 4, 4)), np.array([0, 1]))
        ad.per_sample_gradients(out, params)
        return out.data, [p.per_sample_grad for p in params]

    a, b = run(), run()
    assert np.array_equal(a[0], b[0])
    assert all(np.array_equal(u, v) for u, v in zip(a[1], b[1]))


def test_pad_modes_and_crop_gradients():
    rng = np.random.default_rng(13)
    w = Parameter(rng.standard_normal((1, 2, 4, 4)))
    for mode in ("zero", "circular", "reflect"):
        def f(mode=mode):
            h = ad.pad(ad.mul(ad.batch(np.ones((2, 2, 4, 4))), w), 2, mode)
            h = ad.crop(h, 1, 0, 5, 6)
            return ad.sum(ad.mul(h, h), axis=(1, 2, 3))
        assert ad.finite_difference_check(f, [w], max_coords=None) < 1e-8
