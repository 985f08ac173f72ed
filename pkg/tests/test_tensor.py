import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binlite import tensor as T
from binlite.errors import ShapeError
from binlite.tensor import ConvSpec

import oracles


def test_fill_values():
    z = T.fill([2, 3], "f32", 0)
    assert z.shape == (2, 3) and z.dtype == np.float32 and not z.any()
    one = T.fill([1], "f64", 1.5)
    assert one.dtype == np.float64 and one.tolist() == [1.5]


@pytest.mark.parametrize("shape", [[2, 0], [-1], [], [1, 1, 1, 1, 1]])
def test_fill_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        T.fill(shape, "f32", 0)


def test_zeros_like():
    z = T.zeros_like(np.ones((2, 2), np.float32))
    assert z.dtype == np.float32 and not z.any()


def test_matmul_hand_cases():
    a = np.array([[1, 2], [3, 4]], np.float32)
    np.testing.assert_array_equal(T.matmul(np.eye(2, dtype=np.float32), a), a)
    assert T.matmul(np.array([[1, 2]], np.float32), np.array([[3], [4]], np.float32)).tolist() == [[11]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)
    ref = oracles.matmul_loops(a, b)
    np.testing.assert_allclose(T.matmul(a, b), ref, rtol=1e-6, atol=1e-6)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3), np.float32), np.ones((2, 3), np.float32))
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 2), np.float32), np.ones((2, 2), np.float64))


def test_matmul_associative_f64():
    rng = np.random.default_rng(1)
    a, b, c = (rng.standard_normal((5, 5)) for _ in range(3))
    lhs, rhs = T.matmul(T.matmul(a, b), c), T.matmul(a, T.matmul(b, c))
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(lhs))


def test_conv_shape_arithmetic():
    spec = ConvSpec(3, 3, 1, "same", 3, 32)
    assert spec.output_hw(224, 224) == (224, 224)
    x = np.zeros((224, 224, 3), np.float32)
    y = T.conv2d(x, spec, np.zeros((3, 3, 3, 32), np.float32), np.zeros(32, np.float32))
    assert y.shape == (224, 224, 32)


def test_conv_sum_of_ones():
    spec = ConvSpec(3, 3, 1, "valid", 1, 1)
    y = T.conv2d(np.ones((3, 3, 1), np.float32), spec, np.ones((3, 3, 1, 1), np.float32),
                 np.zeros(1, np.float32))
    assert y.shape == (1, 1, 1) and y[0, 0, 0] == 9


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
def test_conv_matches_direct_loops(stride, padding):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((8, 8, 2)).astype(np.float32)
    w = rng.standard_normal((3, 3, 2, 16)).astype(np.float32)
    b = rng.standard_normal(16).astype(np.float32)
    got = T.conv2d(x, ConvSpec(3, 3, stride, padding, 2, 16), w, b)
    ref = oracles.conv2d_loops(x, w, b, stride, padding)
    np.testing.assert_allclose(got, ref, atol=1e-5)


def test_conv_same_odd_padding_goes_bottom_right():
    spec = ConvSpec(2, 2, 1, "same", 1, 1)
    assert spec.pads(5, 5) == ((0, 1), (0, 1))
    assert ConvSpec(3, 3, 2, "same").pads(8, 8) == ((0, 1), (0, 1))


def test_conv_errors():
    spec = ConvSpec(3, 3, 1, "valid", 2, 4)
    with pytest.raises(ShapeError):
        T.conv2d(np.ones((5, 5, 3), np.float32), spec, np.ones((3, 3, 2, 4), np.float32))
    with pytest.raises(ShapeError):
        T.conv2d(np.ones((2, 2, 2), np.float32), spec, np.ones((3, 3, 2, 4), np.float32))


@pytest.mark.parametrize("k", [1, 3, 5])
def test_same_stride1_preserves_extent(k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 9, 7, 3)).astype(np.float32)
    y = T.conv2d(x, ConvSpec(k, k, 1, "same", 3, 4), rng.standard_normal((k, k, 3, 4)).astype(np.float32))
    assert y.shape == (2, 9, 7, 4)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_conv_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(3, 3, 1, "same", 2, 3)
    w = rng.standard_normal((3, 3, 2, 3)).astype(np.float32)
    x = rng.standard_normal((6, 6, 2)).astype(np.float32)
    y = rng.standard_normal((6, 6, 2)).astype(np.float32)
    lhs = T.conv2d(np.float32(a) * x + np.float32(b) * y, spec, w)
    rhs = np.float32(a) * T.conv2d(x, spec, w) + np.float32(b) * T.conv2d(y, spec, w)
    scale = max(1.0, float(np.abs(lhs).max()))
    assert float(np.abs(lhs - rhs).max()) <= 1e-5 * scale


def test_depthwise_identity_kernel():
    x = np.random.default_rng(0).standard_normal((4, 4, 2)).astype(np.float32)
    k = np.zeros((3, 3, 2), np.float32)
    k[1, 1, :] = 1
    y = T.depthwise_conv2d(x, ConvSpec(3, 3, 1, "same", 2, 2), k)
    np.testing.assert_array_equal(y, x)


@pytest.mark.parametrize("stride", [1, 2])
def test_depthwise_equals_per_channel_conv(stride):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8, 8, 3)).astype(np.float64)
    k = rng.standard_normal((3, 3, 3))
    got = T.depthwise_conv2d(x, ConvSpec(3, 3, stride, "same", 3, 3), k)
    for c in range(3):
        ref = T.conv2d(x[:, :, c:c + 1], ConvSpec(3, 3, stride, "same", 1, 1), k[:, :, c:c + 1, None])
        np.testing.assert_allclose(got[:, :, c:c + 1], ref, atol=1e-6)
    # block-diagonal full conv gives the same thing
    full = np.zeros((3, 3, 3, 3))
    for c in range(3):
        full[:, :, c, c] = k[:, :, c]
    np.testing.assert_allclose(got, T.conv2d(x, ConvSpec(3, 3, stride, "same", 3, 3), full), atol=1e-6)


def test_depthwise_wrong_channels():
    with pytest.raises(ShapeError):
        T.depthwise_conv2d(np.ones((4, 4, 2), np.float32), ConvSpec(3, 3, 1, "same", 2, 2),
                           np.ones((3, 3, 3), np.float32))


def test_pool_hand_cases():
    x = np.array([[1, 2], [3, 4]], np.float32)[:, :, None]
    assert T.pool2d(x, 2, 2, "max")[0, 0, 0] == 4
    assert T.pool2d(x, 2, 2, "mean")[0, 0, 0] == 2.5


@pytest.mark.parametrize("mode", ["max", "mean"])
def test_pool_matches_loops(mode):
    x = np.random.default_rng(2).standard_normal((6, 6, 4)).astype(np.float32)
    np.testing.assert_allclose(T.pool2d(x, 2, 2, mode), oracles.pool_loops(x, 2, 2, mode), atol=1e-6)


def test_pool_window_too_large():
    with pytest.raises(ShapeError):
        T.pool2d(np.ones((2, 2, 1), np.float32), 3, 1, "max")


@given(v=st.floats(-100, 100, width=32), h=st.integers(2, 6), c=st.integers(1, 3))
def test_mean_pool_of_constant_is_exact(v, h, c):
    x = np.full((h, h, c), v, np.float32)
    assert np.all(T.pool2d(x, 2, 2, "mean") == np.float32(v))


def test_quant_tensor_value_prefers_cache():
    q = T.QuantTensor("i8", (3,), np.array([-127, 0, 127], np.int8), 1 / 127)
    np.testing.assert_allclose(q.value(), [-1, 0, 1], atol=1e-7)
    q.cache = np.zeros(3, np.float32)
    assert q.value() is q.cache
