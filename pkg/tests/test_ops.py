import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddpnet import ops
from ddpnet.errors import ConfigError, DataError, ShapeError
from ddpnet.tensor import Tensor


def T(arr, dtype=np.float64):
    return Tensor.wrap(np.asarray(arr, dtype=dtype))


def conv_oracle(x, w, stride, pad, dil):
    """Direct nested-loop convolution."""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                iy, ix = y * stride - pad + i * dil, xx * stride - pad + j * dil
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += x[b, ci, iy, ix] * w[o, ci, i, j]
                    out[b, o, y, xx] = acc
    return out


# --------------------------------------------------------------- convolution


def test_conv_ones_with_zero_padding():
    y = ops.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))), params=ops.ConvParams(1, 1, 3, 1, 1))
    assert y.data[0, 0].tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


def test_conv_dilated_centre():
    y = ops.conv2d(T(np.ones((1, 1, 5, 5))), T(np.ones((1, 1, 3, 3))), params=ops.ConvParams(1, 1, 3, 1, 2, 2))
    assert y.shape == (1, 1, 5, 5) and y.data[0, 0, 2, 2] == 9


def test_conv_stride_samples_even_coordinates():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    y = ops.conv2d(T(x), T(np.ones((1, 1, 1, 1))), params=ops.ConvParams(1, 1, 1, 2, 0))
    assert y.shape == (1, 1, 2, 2) and np.array_equal(y.data[0, 0], x[0, 0, ::2, ::2])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.sampled_from([1, 3]),
       st.integers(1, 2), st.integers(0, 2), st.integers(1, 2), st.integers(0, 10_000))
def test_conv_matches_loop_oracle(c, co, hw, k, stride, pad, dil, seed):
    rng = np.random.default_rng(seed)
    if hw + 2 * pad - dil * (k - 1) < 1:
        pad = dil * (k - 1)
    x = rng.standard_normal((2, c, hw, hw + 1))
    w = rng.standard_normal((co, c, k, k))
    y = ops.conv2d(T(x), T(w), params=ops.ConvParams(c, co, k, stride, pad, dil))
    np.testing.assert_allclose(y.data, conv_oracle(x, w, stride, pad, dil), rtol=1e-10, atol=1e-10)


def test_conv_bias_is_added_per_channel(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    w = rng.standard_normal((2, 2, 1, 1))
    b = np.array([1.5, -2.0])
    y = ops.conv2d(T(x), T(w), T(b), ops.ConvParams(2, 2, 1, has_bias=True))
    y0 = ops.conv2d(T(x), T(w), params=ops.ConvParams(2, 2, 1))
    np.testing.assert_allclose(y.data - y0.data, np.broadcast_to(b[None, :, None, None], y.shape))


def test_conv_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        ops.conv2d(T(rng.standard_normal((1, 3, 4, 4))), T(rng.standard_normal((2, 4, 1, 1))))


def test_conv_rejects_empty_output(rng):
    with pytest.raises(ShapeError):
        ops.conv2d(T(rng.standard_normal((1, 1, 2, 2))), T(np.ones((1, 1, 3, 3))), params=ops.ConvParams(1, 1, 3))


def test_conv_params_out_hw():
    assert ops.ConvParams(8, 8, 3, 2, 1).out_hw(64, 32) == (32, 16)
    assert ops.ConvParams(3, 32, 3).weight_shape == (32, 3, 3, 3)


# ----------------------------------------------------------------- batch norm


def test_batch_norm_eval_identity_statistics(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    st_ = ops.BatchNormState.create(3, np.float64)
    st_.mode = "eval"
    y = ops.batch_norm(T(x), st_)
    np.testing.assert_allclose(y.data, x / math.sqrt(1 + st_.eps), rtol=1e-12)


def test_batch_norm_train_constant_input_gives_beta():
    st_ = ops.BatchNormState.create(2, np.float64)
    st_.beta = T([0.5, -1.0])
    y = ops.batch_norm(T(np.full((2, 2, 3, 3), 7.0)), st_)
    np.testing.assert_allclose(y.data, np.broadcast_to(np.array([0.5, -1.0])[None, :, None, None], y.shape))


def test_batch_norm_train_output_statistics(rng):
    st_ = ops.BatchNormState.create(3, np.float64)
    gamma, beta = np.array([2.0, 0.5, 1.5]), np.array([0.1, -0.3, 2.0])
    st_.gamma, st_.beta = T(gamma), T(beta)
    y = ops.batch_norm(T(rng.standard_normal((4, 3, 5, 5)) * 3 + 1), st_).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), beta, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), gamma ** 2, atol=1e-3)


def test_batch_norm_updates_running_statistics(rng):
    x = rng.standard_normal((4, 2, 3, 3)) + 5
    st_ = ops.BatchNormState.create(2, np.float64)
    ops.batch_norm(T(x), st_)
    n = x.size // 2
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))


def test_batch_norm_refuses_single_value_per_channel():
    with pytest.raises(ShapeError):
        ops.batch_norm(T(np.ones((1, 2, 1, 1))), ops.BatchNormState.create(2, np.float64))


# ---------------------------------------------------- activation and dropout


def test_relu():
    assert ops.relu(T([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]


def test_dropout_p_zero_and_eval_are_identity(rng):
    x = T(rng.standard_normal((2, 2, 3, 3)))
    assert ops.dropout(x, 0.0, rng, True) is x
    assert ops.dropout(x, 0.5, rng, False) is x


def test_dropout_statistics():
    x = T(np.ones((1, 1, 1000, 1000)))
    y = ops.dropout(x, 0.1, np.random.default_rng(0), True).data
    assert abs((y > 0).mean() - 0.9) < 0.01
    assert abs(y.mean() - 1.0) < 0.01


def test_dropout_requires_rng_in_train_mode():
    with pytest.raises(ConfigError):
        ops.dropout(T(np.ones((1, 1, 2, 2))), 0.5, None, True)


# -------------------------------------------------------------------- pooling


def test_pooling_examples():
    x = T(np.array([[1, 3], [5, 7]]).reshape(1, 1, 2, 2))
    assert ops.pool2x2(x, "avg").data.item() == 4
    assert ops.pool2x2(x, "max").data.item() == 7


@pytest.mark.parametrize("kind", ["avg", "max"])
def test_pooling_constant(kind):
    y = ops.pool2x2(T(np.full((2, 3, 4, 6), 2.5)), kind)
    assert y.shape == (2, 3, 2, 3) and np.all(y.data == 2.5)


def test_pooling_rejects_odd_extent():
    with pytest.raises(ShapeError):
        ops.pool2x2(T(np.ones((1, 1, 3, 4))))


# ------------------------------------------------------------------- bilinear


def test_bilinear_hand_values():
    y = ops.bilinear_upsample(T(np.array([0.0, 1.0]).reshape(1, 1, 1, 2)), 2)
    assert y.data[0, 0, 0].tolist() == [0, 0.25, 0.75, 1]


@pytest.mark.parametrize("factor", [2, 3, 4, 8])
def test_bilinear_preserves_constants(factor):
    y = ops.bilinear_upsample(T(np.full((1, 2, 3, 5), -1.25)), factor)
    assert y.shape == (1, 2, 3 * factor, 5 * factor)
    np.testing.assert_allclose(y.data, -1.25, rtol=0, atol=1e-12)


def test_bilinear_factor_one_is_identity(rng):
    x = T(rng.standard_normal((1, 2, 3, 3)))
    assert ops.bilinear_upsample(x, 1) is x


# -------------------------------------------------------------- pixel shuffle


def test_pixel_shuffle_channel_order():
    y = ops.pixel_shuffle(T(np.array([1, 2, 3, 4.0]).reshape(1, 4, 1, 1)), 2)
    assert y.shape == (1, 1, 2, 2) and y.data[0, 0].tolist() == [[1, 2], [3, 4]]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_pixel_shuffle_conserves_elements(n, c, r, h, w):
    x = np.random.default_rng(0).standard_normal((n, c * r * r, h, w))
    y = ops.pixel_shuffle(T(x), r)
    assert y.shape == (n, c, h * r, w * r)
    assert np.array_equal(np.sort(y.data.ravel()), np.sort(x.ravel()))


def test_pixel_shuffle_rejects_indivisible_channels():
    with pytest.raises(ShapeError):
        ops.pixel_shuffle(T(np.ones((1, 3, 2, 2))), 2)


# -------------------------------------------------------------------- softmax


def test_softmax_examples():
    assert np.allclose(ops.channel_softmax(T(np.zeros((1, 9, 2, 2)))).data, 1 / 9)
    y = ops.channel_softmax(T(np.array([math.log(2), 0]).reshape(1, 2, 1, 1))).data.ravel()
    np.testing.assert_allclose(y, [2 / 3, 1 / 3])


def test_softmax_sums_to_one(rng):
    y = ops.channel_softmax(T(rng.standard_normal((2, 5, 4, 4)) * 30)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


# ------------------------------------------------------------ dynamic filter


def box_oracle(h):
    """3x3 zero-padded box sum divided by 9, by direct loops."""
    n, c, hh, ww = h.shape
    out = np.zeros_like(h)
    for y in range(hh):
        for x in range(ww):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if 0 <= y + dy < hh and 0 <= x + dx < ww:
                        out[:, :, y, x] += h[:, :, y + dy, x + dx] / 9
    return out


def test_dynamic_filter_uniform_on_constant():
    y = ops.dynamic_filter_apply(T(np.full((1, 2, 5, 5), 3.0)), T(np.full((1, 9, 5, 5), 1 / 9))).data
    np.testing.assert_allclose(y[:, :, 1:-1, 1:-1], 3.0)


def test_dynamic_filter_centre_delta_is_identity(rng):
    h = rng.standard_normal((2, 3, 4, 5))
    f = np.zeros((2, 9, 4, 5))
    f[:, 4] = 1
    assert np.array_equal(ops.dynamic_filter_apply(T(h), T(f)).data, h)


def test_dynamic_filter_uniform_on_ramp_is_box_filter():
    h = np.arange(30.0).reshape(1, 1, 5, 6)
    y = ops.dynamic_filter_apply(T(h), T(np.full((1, 9, 5, 6), 1 / 9))).data
    np.testing.assert_allclose(y, box_oracle(h), rtol=1e-12)


def test_dynamic_filter_rejects_non_square_window():
    with pytest.raises(ShapeError):
        ops.dynamic_filter_apply(T(np.ones((1, 1, 2, 2))), T(np.ones((1, 8, 2, 2))))


# ----------------------------------------------------------------------- loss


def test_cross_entropy_uniform_logits():
    loss = ops.cross_entropy_loss(T(np.zeros((2, 4, 3, 3))), np.zeros((2, 3, 3), int))
    assert loss.item() == pytest.approx(math.log(4), rel=1e-12)


def test_cross_entropy_all_ignored_is_zero():
    from ddpnet.autodiff import Tape, gradients

    x = Tensor.wrap(np.ones((1, 3, 2, 2)), requires_grad=True)
    with Tape():
        loss = ops.cross_entropy_loss(x, np.full((1, 2, 2), 255))
    (g,) = gradients(loss, [x])
    assert loss.item() == 0 and not g.any()


def test_cross_entropy_confident_pixel():
    loss = ops.cross_entropy_loss(T(np.array([10.0, -10.0]).reshape(1, 2, 1, 1)), np.zeros((1, 1, 1), int))
    assert loss.item() == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)
    assert loss.item() == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(DataError):
        ops.cross_entropy_loss(T(np.zeros((1, 2, 1, 1))), np.full((1, 1, 1), 2))


def test_relu_propagates_nan():
    y = ops.relu(Tensor.wrap(np.array([np.nan, -1.0, 2.0])))
    assert np.isnan(y.data[0]) and y.data[1:].tolist() == [0.0, 2.0]
