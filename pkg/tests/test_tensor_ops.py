"""
Tests for the convolution kernels and layer primitives.
"""
import math

import numpy as np
import pytest

from src.errors import MaskError, ShapeError
from src.tensor_ops import (
    ConvGeometry, MacCounter, channel_slice, conv2d_forward, conv2d_input_grad,
    conv2d_weight_grad_masked, get_mac_counter, global_avg_pool_backward,
    global_avg_pool_forward, linear_backward, linear_forward, relu_backward,
    relu_forward, residual_add_backward, softmax_cross_entropy,
)


def direct_conv(x, w, geom):
    """Loop-nest cross-correlation."""
    batch, _, height, width = x.shape
    out_h, out_w = geom.output_hw(height, width)
    p, s, dil = geom.padding, geom.stride, geom.dilation
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((batch, geom.out_channels, out_h, out_w))
    for b in range(batch):
        for o in range(geom.out_channels):
            group = o // geom.out_per_group
            for ci in range(geom.in_per_group):
                c = group * geom.in_per_group + ci
                for k in range(geom.kernel):
                    for l in range(geom.kernel):
                        for i in range(out_h):
                            for j in range(out_w):
                                out[b, o, i, j] += w[o, ci, k, l] * xp[b, c, i * s + k * dil, j * s + l * dil]
    return out


def direct_weight_grad(x, up, geom):
    """Weight derivative straight from its definition, summed over batch and output positions."""
    batch, _, height, width = x.shape
    out_h, out_w = geom.output_hw(height, width)
    p, s, dil = geom.padding, geom.stride, geom.dilation
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    grad = np.zeros(geom.weight_shape)
    for o in range(geom.out_channels):
        group = o // geom.out_per_group
        for ci in range(geom.in_per_group):
            c = group * geom.in_per_group + ci
            for k in range(geom.kernel):
                for l in range(geom.kernel):
                    total = 0.0
                    for b in range(batch):
                        for i in range(out_h):
                            for j in range(out_w):
                                total += up[b, o, i, j] * xp[b, c, i * s + k * dil, j * s + l * dil]
                    grad[o, ci, k, l] = total
    return grad


GEOMETRIES = [
    ConvGeometry(3, 4, 3),
    ConvGeometry(2, 4, 3, stride=2, padding=1),
    ConvGeometry(4, 4, 3, padding=2, dilation=2, groups=2),
    ConvGeometry(3, 3, 3, padding=1, groups=3),
]


# ----------------------------------------------------------------------
# Forward
# ----------------------------------------------------------------------

def test_scalar_kernel_scales_input():
    out = conv2d_forward(np.ones((1, 1, 2, 2)), np.full((1, 1, 1, 1), 3.0), ConvGeometry(1, 1, 1))
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out == 3.0)


def test_centered_impulse_with_ones_kernel():
    """Every padded 3x3 window covers the center pixel once."""
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1.0
    out = conv2d_forward(x, np.ones((1, 1, 3, 3)), ConvGeometry(1, 1, 3, padding=1))
    assert np.array_equal(out, np.ones((1, 1, 3, 3)))


@pytest.mark.parametrize("geom", GEOMETRIES)
def test_forward_matches_loop_oracle(geom, rng):
    x = rng.standard_normal((2, geom.in_channels, 7, 6))
    w = rng.standard_normal(geom.weight_shape)
    assert np.allclose(conv2d_forward(x, w, geom), direct_conv(x, w, geom), atol=1e-12, rtol=0)


def test_depthwise_group_independence(rng):
    geom = ConvGeometry(2, 2, 3, padding=1, groups=2)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal(geom.weight_shape)
    x[:, 0] = 0.0
    out = conv2d_forward(x, w, geom)
    assert np.all(out[:, 0] == 0.0)
    assert np.any(out[:, 1] != 0.0)


def test_forward_shape_errors_name_the_dimension(rng):
    geom = ConvGeometry(3, 4, 3)
    with pytest.raises(ShapeError) as info:
        conv2d_forward(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal(geom.weight_shape), geom)
    assert info.value.dimension == "input channels"
    with pytest.raises(ShapeError) as info:
        conv2d_forward(rng.standard_normal((1, 3, 5, 5)), rng.standard_normal((4, 3, 2, 3)), geom)
    assert "kernel height" in info.value.dimension
    with pytest.raises(ShapeError):
        conv2d_forward(rng.standard_normal((1, 3, 2, 2)), rng.standard_normal(geom.weight_shape), geom)


def test_geometry_rejects_bad_groups():
    with pytest.raises(ShapeError):
        ConvGeometry(3, 4, 3, groups=2)


# ----------------------------------------------------------------------
# Masked weight gradient
# ----------------------------------------------------------------------

def test_weight_grad_sum_of_ones():
    geom = ConvGeometry(1, 1, 1)
    grad, flags = conv2d_weight_grad_masked(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), geom, [True],
                                            MacCounter())
    assert np.array_equal(grad, np.array([[[[4.0]]]]))
    assert flags.tolist() == [True]


def test_weight_grad_masked_out_channel():
    geom = ConvGeometry(1, 1, 1)
    grad, flags = conv2d_weight_grad_masked(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), geom, [False],
                                            MacCounter())
    assert np.all(grad == 0.0)
    assert flags.tolist() == [False]


def test_masked_slices_match_dense(rng):
    geom = ConvGeometry(3, 4, 3)
    x = rng.standard_normal((1, 3, 5, 5))
    up = rng.standard_normal((1, 4, 3, 3))
    dense, _ = conv2d_weight_grad_masked(x, up, geom, [True, True, True], MacCounter())
    masked, flags = conv2d_weight_grad_masked(x, up, geom, [True, False, True], MacCounter())
    assert flags.tolist() == [True, False, True]
    assert np.max(np.abs(masked[:, [0, 2]] - dense[:, [0, 2]])) <= 1e-12
    assert np.all(masked[:, 1] == 0.0)


@pytest.mark.parametrize("geom", GEOMETRIES)
def test_weight_grad_matches_triple_sum(geom, rng):
    x = rng.standard_normal((2, geom.in_channels, 6, 7))
    out_h, out_w = geom.output_hw(6, 7)
    up = rng.standard_normal((2, geom.out_channels, out_h, out_w))
    mask = rng.random(geom.in_channels) < 0.6
    grad, flags = conv2d_weight_grad_masked(x, up, geom, mask, MacCounter())
    oracle = direct_weight_grad(x, up, geom)
    for c in range(geom.in_channels):
        got = channel_slice(grad, geom, c)
        if mask[c]:
            assert np.allclose(got, channel_slice(oracle, geom, c), atol=1e-12, rtol=0)
        else:
            assert np.all(got == 0.0)
    assert np.array_equal(flags, mask)


def test_weight_grad_is_linear_in_upstream(rng):
    geom = ConvGeometry(2, 4, 3, padding=1, groups=2)
    x = rng.standard_normal((2, 2, 5, 5))
    up1 = rng.standard_normal((2, 4, 5, 5))
    up2 = rng.standard_normal((2, 4, 5, 5))
    lam = float(rng.uniform(0.5, 2.0))
    mask = [True, True]
    combined, _ = conv2d_weight_grad_masked(x, lam * up1 + up2, geom, mask, MacCounter())
    g1, _ = conv2d_weight_grad_masked(x, up1, geom, mask, MacCounter())
    g2, _ = conv2d_weight_grad_masked(x, up2, geom, mask, MacCounter())
    assert np.max(np.abs(combined - (lam * g1 + g2))) <= 1e-12


def test_group_independence_of_weight_grad(rng):
    """Channel c's slice only sees upstream of the outputs in c's group."""
    geom = ConvGeometry(4, 4, 3, padding=1, groups=2)
    x = rng.standard_normal((1, 4, 5, 5))
    up = rng.standard_normal((1, 4, 5, 5))
    base, _ = conv2d_weight_grad_masked(x, up, geom, [True] * 4, MacCounter())
    perturbed = up.copy()
    perturbed[:, 2:] += rng.standard_normal((1, 2, 5, 5))
    moved, _ = conv2d_weight_grad_masked(x, perturbed, geom, [True] * 4, MacCounter())
    for c in (0, 1):
        assert np.array_equal(channel_slice(base, geom, c), channel_slice(moved, geom, c))
    assert not np.array_equal(channel_slice(base, geom, 2), channel_slice(moved, geom, 2))


def test_mask_length_must_match_channels(rng):
    geom = ConvGeometry(3, 4, 3)
    with pytest.raises(MaskError):
        conv2d_weight_grad_masked(rng.standard_normal((1, 3, 5, 5)), rng.standard_normal((1, 4, 3, 3)),
                                  geom, [True, False], MacCounter())


def test_mac_counter_counts_selected_channels_only(rng):
    geom = ConvGeometry(4, 6, 3, padding=1, groups=2)
    counter = MacCounter()
    x = rng.standard_normal((3, 4, 5, 5))
    up = rng.standard_normal((3, 6, 5, 5))
    conv2d_weight_grad_masked(x, up, geom, [True, False, False, True], counter)
    # 2 channels * (C'/g = 3) * 9 taps * 25 output positions * batch 3
    assert counter.value == 2 * 3 * 9 * 25 * 3
    assert counter.reset() == 2 * 3 * 9 * 25 * 3
    assert counter.value == 0


def test_global_counter_is_shared():
    assert get_mac_counter() is get_mac_counter()
    before = get_mac_counter().value
    conv2d_weight_grad_masked(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), ConvGeometry(1, 1, 1), [True])
    assert get_mac_counter().value - before == 4


# ----------------------------------------------------------------------
# Input gradient and finite differences
# ----------------------------------------------------------------------

def test_input_grad_of_scalar_kernel(rng):
    up = rng.standard_normal((2, 1, 3, 3))
    grad = conv2d_input_grad(np.full((1, 1, 1, 1), 2.5), up, ConvGeometry(1, 1, 1), (3, 3))
    assert np.array_equal(grad, 2.5 * up)


def test_input_grad_of_zero_upstream(rng):
    geom = ConvGeometry(2, 3, 3, stride=2, padding=1)
    grad = conv2d_input_grad(rng.standard_normal(geom.weight_shape), np.zeros((1, 3, 3, 3)), geom, (6, 6))
    assert grad.shape == (1, 2, 6, 6)
    assert np.all(grad == 0.0)


def _relative_error(analytic, numeric):
    return np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12)


@pytest.mark.parametrize("geom", GEOMETRIES)
def test_conv_gradients_match_finite_differences(geom, rng):
    """Loss sum(out^2) / 2, so the upstream derivative is the output itself."""
    h = 1e-6
    x = rng.standard_normal((2, geom.in_channels, 6, 6))
    w = rng.standard_normal(geom.weight_shape)

    def loss(x_, w_):
        return 0.5 * float(np.sum(conv2d_forward(x_, w_, geom) ** 2))

    out = conv2d_forward(x, w, geom)
    dx = conv2d_input_grad(w, out, geom, (6, 6))
    dw, _ = conv2d_weight_grad_masked(x, out, geom, np.ones(geom.in_channels, dtype=bool), MacCounter())

    numeric_dx = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += h
        minus[index] -= h
        numeric_dx[index] = (loss(plus, w) - loss(minus, w)) / (2 * h)
    numeric_dw = np.zeros_like(w)
    for index in np.ndindex(w.shape):
        plus, minus = w.copy(), w.copy()
        plus[index] += h
        minus[index] -= h
        numeric_dw[index] = (loss(x, plus) - loss(x, minus)) / (2 * h)

    assert _relative_error(dx, numeric_dx) <= 1e-6
    assert _relative_error(dw, numeric_dw) <= 1e-6


# ----------------------------------------------------------------------
# Primitives
# ----------------------------------------------------------------------

def test_relu_indicator_is_strict():
    y, active = relu_forward(np.array([-1.0, 0.0, 2.0]))
    assert y.tolist() == [0.0, 0.0, 2.0]
    assert relu_backward(active, np.ones(3)).tolist() == [0.0, 0.0, 1.0]


def test_relu_backward_shape_mismatch():
    _, active = relu_forward(np.ones(3))
    with pytest.raises(ShapeError):
        relu_backward(active, np.ones(4))


def test_global_average_pool():
    y, hw = global_avg_pool_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert y.tolist() == [[2.5]]
    dx = global_avg_pool_backward(hw, np.array([[4.0]]))
    assert np.array_equal(dx, np.ones((1, 1, 2, 2)))


def test_residual_add_duplicates_upstream(rng):
    dy = rng.standard_normal((1, 2, 3, 3))
    a, b = residual_add_backward(dy)
    assert np.array_equal(a, dy) and np.array_equal(b, dy)


def test_linear_gradients_match_finite_differences(rng):
    h = 1e-6
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((3, 5))
    b = rng.standard_normal(3)
    target = rng.standard_normal((4, 3))

    def loss(x_, w_, b_):
        return 0.5 * float(np.sum((linear_forward(x_, w_, b_) - target) ** 2))

    dy = linear_forward(x, w, b) - target
    dx, dw, db = linear_backward(x, w, dy)
    for analytic, tensor, which in ((dx, x, 0), (dw, w, 1), (db, b, 2)):
        numeric = np.zeros_like(tensor)
        for index in np.ndindex(tensor.shape):
            args_plus = [x.copy(), w.copy(), b.copy()]
            args_minus = [x.copy(), w.copy(), b.copy()]
            args_plus[which][index] += h
            args_minus[which][index] -= h
            numeric[index] = (loss(*args_plus) - loss(*args_minus)) / (2 * h)
        assert _relative_error(analytic, numeric) <= 1e-6


def test_softmax_uniform_logits():
    loss, dlogits = softmax_cross_entropy(np.zeros((3, 4)), [0, 1, 3])
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    assert np.allclose(dlogits.sum(axis=1), 0.0, atol=1e-12)


def test_softmax_confident_true_class():
    logits = np.zeros((1, 4, 1, 1))
    logits[0, 2] = 50.0
    loss, dlogits = softmax_cross_entropy(logits, [2])
    assert loss < 1e-20
    assert dlogits.shape == (1, 4)


def test_softmax_rows_sum_to_zero(rng):
    _, dlogits = softmax_cross_entropy(rng.standard_normal((6, 5)) * 10, rng.integers(0, 5, 6))
    assert np.max(np.abs(dlogits.sum(axis=1))) <= 1e-12


def test_softmax_label_out_of_range():
    with pytest.raises(ShapeError):
        softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
