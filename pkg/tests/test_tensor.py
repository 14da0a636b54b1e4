"""Tensor op tests: naive-loop oracles, analytic invariants, gradient checks."""

import numpy as np
import pytest

from wicbr import tensor as T

from oracles import batch_norm_naive, conv2d_naive, group_norm_naive, softmax_naive

RNG = np.random.default_rng(20240817)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_one_by_one_identity():
    x = RNG.normal(size=(2, 3, 6, 5))
    k = np.zeros((3, 3, 1, 1))
    for c in range(3):
        k[c, c, 0, 0] = 1.0
    assert np.array_equal(T.conv2d(x, k), x)


def test_conv2d_all_ones_on_constant():
    c = 2.5
    x = np.full((1, 2, 8, 8), c)
    k = np.ones((1, 2, 3, 3))
    out = T.conv2d(x, k, stride=1, pad=0)
    # interior of a valid conv: every tap sees the constant
    assert np.allclose(out, 9 * 2 * c)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv2d_matches_naive(stride, pad):
    for _ in range(4):
        n, c, f = RNG.integers(1, 4), RNG.integers(1, 4), RNG.integers(1, 5)
        kh = int(RNG.choice([1, 3, 5]))
        h = int(RNG.integers(kh + stride, 14))
        w = int(RNG.integers(kh + stride, 14))
        x = RNG.normal(size=(n, c, h, w))
        k = RNG.normal(size=(f, c, kh, kh))
        got = T.conv2d(x, k, stride=stride, pad=pad)
        want = conv2d_naive(x, k, stride=stride, pad=pad)
        assert np.max(np.abs(got - want)) <= 1e-10


def test_conv2d_fft_path_matches_direct():
    x = RNG.normal(size=(2, 3, 50, 46))
    k = RNG.normal(size=(4, 3, 7, 7))
    a = T.conv2d(x, k, stride=1, pad=3, method="direct")
    b = T.conv2d(x, k, stride=1, pad=3, method="fft")
    assert np.max(np.abs(a - b)) < 1e-10


def test_conv2d_fft_backward_matches_direct():
    x = RNG.normal(size=(2, 3, 40, 33))
    k = RNG.normal(size=(2, 3, 5, 5))
    dout = RNG.normal(size=T.conv2d(x, k, pad=2).shape)
    dx_a, dk_a = T.conv2d_backward(dout, x, k, pad=2, method="direct")
    dx_b, dk_b = T.conv2d_backward(dout, x, k, pad=2, method="fft")
    assert np.max(np.abs(dx_a - dx_b)) < 1e-10
    assert np.max(np.abs(dk_a - dk_b)) < 1e-10


def test_conv2d_shape_errors():
    x = RNG.normal(size=(1, 3, 8, 8))
    with pytest.raises(ValueError):
        T.conv2d(x, RNG.normal(size=(2, 4, 3, 3)))  # channel mismatch
    with pytest.raises(ValueError):
        T.conv2d(x, RNG.normal(size=(2, 3, 2, 2)))  # even kernel
    with pytest.raises(ValueError):
        T.conv2d(x, RNG.normal(size=(2, 3, 11, 11)))  # does not fit


def test_conv2d_deterministic():
    x = RNG.normal(size=(2, 3, 30, 30))
    k = RNG.normal(size=(4, 3, 3, 3))
    a = T.conv2d(x, k, stride=2, pad=1)
    b = T.conv2d(x.copy(), k.copy(), stride=2, pad=1)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# normalization


def test_group_norm_matches_naive():
    for groups, c in [(1, 4), (2, 4), (4, 4), (2, 6)]:
        x = RNG.normal(size=(2, c, 5, 4))
        gamma = RNG.normal(size=c)
        z = RNG.normal(size=c)
        got = T.group_norm(x, groups, gamma, z)
        want = group_norm_naive(x, groups, gamma, z)
        assert np.max(np.abs(got - want)) <= 1e-10


def test_group_norm_constant_input_gives_shift():
    x = np.full((3, 4, 6, 6), 7.25)
    gamma = RNG.normal(size=4)
    z = RNG.normal(size=4)
    out = T.group_norm(x, 2, gamma, z)
    # zero variance: standardized value is 0, only the shift remains
    assert np.allclose(out, np.broadcast_to(z[None, :, None, None], out.shape))


def test_group_norm_standardizes():
    x = RNG.normal(loc=3.0, scale=2.0, size=(4, 8, 10, 10))
    out = T.group_norm(x, 4, np.ones(8), np.zeros(8))
    grouped = out.reshape(4, 4, -1)
    assert np.max(np.abs(grouped.mean(-1))) < 1e-12
    assert np.max(np.abs(grouped.std(-1) - 1.0)) < 1e-4


def test_group_norm_group_errors():
    x = RNG.normal(size=(1, 6, 3, 3))
    with pytest.raises(ValueError):
        T.group_norm(x, 4, np.ones(6), np.zeros(6))
    with pytest.raises(ValueError):
        T.group_norm(x, 2, np.ones(6), np.zeros(6), eps=0.0)


def test_batch_norm_matches_naive_and_is_affine():
    x = RNG.normal(size=(3, 4, 5, 5))
    gamma, beta = RNG.normal(size=4), RNG.normal(size=4)
    mean, var = RNG.normal(size=4), RNG.uniform(0.5, 2.0, size=4)
    got = T.batch_norm(x, gamma, beta, mean, var)
    want = batch_norm_naive(x, gamma, beta, mean, var)
    assert np.max(np.abs(got - want)) <= 1e-10
    # fixed statistics: result for one sample is independent of the batch
    solo = T.batch_norm(x[:1], gamma, beta, mean, var)
    assert np.allclose(got[:1], solo)


def test_batch_norm_identity_at_init():
    x = RNG.normal(size=(2, 3, 4, 4))
    out = T.batch_norm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=1e-5)
    assert np.max(np.abs(out - x / np.sqrt(1 + 1e-5))) < 1e-12


# ---------------------------------------------------------------------------
# pointwise / shape ops


def test_sigmoid_basics():
    assert T.sigmoid(np.array([0.0]))[0] == 0.5
    big = T.sigmoid(np.array([800.0, -800.0]))
    assert 0.0 <= big[1] and big[0] <= 1.0 and np.all(np.isfinite(big))
    x = RNG.normal(size=100)
    assert np.allclose(T.sigmoid(x) + T.sigmoid(-x), 1.0)


def test_relu_and_backward_mask():
    x = np.array([[-1.0, 0.0, 2.0]])
    assert np.array_equal(T.relu(x), [[0.0, 0.0, 2.0]])
    d = T.relu_backward(np.ones_like(x), x)
    assert np.array_equal(d, [[0.0, 0.0, 1.0]])


def test_concat_split_roundtrip():
    a = RNG.normal(size=(2, 3, 4, 4))
    b = RNG.normal(size=(2, 5, 4, 4))
    cat = T.concat_channels(a, b)
    assert cat.shape == (2, 8, 4, 4)
    a2, b2 = T.split_channels(cat, 3)
    assert np.array_equal(a, a2) and np.array_equal(b, b2)
    with pytest.raises(ValueError):
        T.concat_channels(a, RNG.normal(size=(2, 3, 5, 4)))


def test_concat_paper_scale_shape():
    a = np.zeros((1, 512, 7, 7))
    b = np.zeros((1, 512, 7, 7))
    assert T.concat_channels(a, b).shape == (1, 1024, 7, 7)


def test_global_avg_pool():
    x = RNG.normal(size=(2, 3, 4, 5))
    assert np.allclose(T.global_avg_pool(x), x.mean(axis=(2, 3)))


def test_linear_matches_manual():
    x = RNG.normal(size=(4, 6))
    w = RNG.normal(size=(3, 6))
    b = RNG.normal(size=3)
    want = np.array([[float(x[i] @ w[j] + b[j]) for j in range(3)] for i in range(4)])
    assert np.max(np.abs(T.linear(x, w, b) - want)) < 1e-12


def test_softmax_matches_naive_and_sums_to_one():
    x = RNG.normal(size=(6, 5)) * 10
    got = T.softmax(x)
    assert np.max(np.abs(got - softmax_naive(x))) <= 1e-12
    assert np.allclose(got.sum(axis=-1), 1.0)
    assert np.all(got > 0)


def test_softmax_uniform_on_equal_logits():
    x = np.full((2, 8), 3.7)
    assert np.allclose(T.softmax(x), 1 / 8)


def test_softmax_shift_invariance():
    x = RNG.normal(size=(3, 4))
    assert np.allclose(T.softmax(x), T.softmax(x + 123.456))


# ---------------------------------------------------------------------------
# gradient checks (analytic backward vs central differences, rel err < 1e-6)

GTOL = 1e-6


def _check(fn, inputs, analytic):
    err = T.grad_check(fn, inputs, analytic, delta=1e-5)
    assert err < GTOL, f"grad check failed: {err:.3e}"


@pytest.mark.parametrize("method,stride,pad", [("direct", 1, 1), ("direct", 2, 1), ("fft", 1, 2)])
def test_grad_conv2d(method, stride, pad):
    x = RNG.normal(size=(2, 3, 7, 6))
    k = RNG.normal(size=(2, 3, 5, 5))
    r = RNG.normal(size=T.conv2d(x, k, stride=stride, pad=pad).shape)

    def f():
        return (T.conv2d(x, k, stride=stride, pad=pad, method=method) * r).sum()

    dx, dk = T.conv2d_backward(r, x, k, stride=stride, pad=pad, method=method)
    _check(f, [x, k], [dx, dk])


def test_grad_conv_bias():
    out = RNG.normal(size=(2, 3, 4, 4))
    b = RNG.normal(size=3)
    r = RNG.normal(size=out.shape)

    def f():
        return (T.conv_bias(out, b) * r).sum()

    _check(f, [b], [T.conv_bias_backward(r)])


def test_grad_batch_norm():
    x = RNG.normal(size=(2, 3, 4, 4))
    gamma, beta = RNG.normal(size=3), RNG.normal(size=3)
    mean, var = RNG.normal(size=3), RNG.uniform(0.5, 2.0, size=3)
    r = RNG.normal(size=x.shape)

    def f():
        return (T.batch_norm(x, gamma, beta, mean, var) * r).sum()

    dx, dgamma, dbeta = T.batch_norm_backward(r, x, gamma, mean, var)
    _check(f, [x, gamma, beta], [dx, dgamma, dbeta])


def test_grad_group_norm():
    x = RNG.normal(size=(2, 4, 5, 5))
    gamma, z = RNG.normal(size=4), RNG.normal(size=4)
    r = RNG.normal(size=x.shape)

    def f():
        return (T.group_norm(x, 2, gamma, z) * r).sum()

    dx, dgamma, dz = T.group_norm_backward(r, x, 2, gamma, z)
    _check(f, [x, gamma, z], [dx, dgamma, dz])


def test_grad_sigmoid():
    x = RNG.normal(size=(3, 4))
    r = RNG.normal(size=x.shape)

    def f():
        return (T.sigmoid(x) * r).sum()

    _check(f, [x], [T.sigmoid_backward(r, T.sigmoid(x))])


def test_grad_relu():
    # keep values away from the kink at 0
    x = RNG.normal(size=(3, 4))
    x[np.abs(x) < 0.05] = 0.5
    r = RNG.normal(size=x.shape)

    def f():
        return (T.relu(x) * r).sum()

    _check(f, [x], [T.relu_backward(r, x)])


def test_grad_global_avg_pool():
    x = RNG.normal(size=(2, 3, 4, 5))
    r = RNG.normal(size=(2, 3))

    def f():
        return (T.global_avg_pool(x) * r).sum()

    _check(f, [x], [T.global_avg_pool_backward(r, 4, 5)])


def test_grad_linear():
    x = RNG.normal(size=(4, 6))
    w = RNG.normal(size=(3, 6))
    b = RNG.normal(size=3)
    r = RNG.normal(size=(4, 3))

    def f():
        return (T.linear(x, w, b) * r).sum()

    dx, dw, db = T.linear_backward(r, x, w)
    _check(f, [x, w, b], [dx, dw, db])


def test_grad_softmax():
    x = RNG.normal(size=(3, 5))
    r = RNG.normal(size=x.shape)

    def f():
        return (T.softmax(x) * r).sum()

    _check(f, [x], [T.softmax_backward(r, T.softmax(x))])


def test_grad_check_flags_wrong_gradient():
    x = RNG.normal(size=(3,))

    def f():
        return float((x**2).sum())

    err = T.grad_check(f, [x], [2 * x + 0.1])
    assert err > 1e-3


# ---------------------------------------------------------------------------
# tensor dump format


def test_tensor_roundtrip(tmp_path):
    for shape in [(3,), (2, 4), (2, 3, 4, 5), (1,)]:
        arr = RNG.normal(size=shape)
        p = tmp_path / "t.bin"
        T.write_tensor(p, arr)
        back = T.read_tensor(p)
        assert back.shape == arr.shape
        assert np.array_equal(back, np.asarray(arr, dtype=np.float64))


def test_tensor_rejects_corrupt(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\x02\x00\x00\x00\x03\x00\x00\x00")
    with pytest.raises(ValueError):
        T.read_tensor(p)
    T.write_tensor(p, np.zeros((2, 2)))
    data = p.read_bytes()
    p.write_bytes(data[:-4])
    with pytest.raises(ValueError):
        T.read_tensor(p)
