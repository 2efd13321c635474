"""
Channel norms, RGN, layer RGN and the cumulative curve.
"""
import math

import numpy as np
import pytest

from src.cost_model import ChannelCost, build_cost_table
from src.errors import StatisticsError, UncomputedGradientError
from src.metrics import (
    LayerRgnProfile, channel_grad_norm, channel_norms, channel_rgn, channel_scores, cumulative_rgn_curve,
    layer_rgn, rank_layers,
)
from src.network import backward, forward, full_mask
from src.tensor_ops import ConvGeometry, MacCounter, softmax_cross_entropy
from tests.conftest import random_mask


def test_channel_grad_norm():
    assert channel_grad_norm(np.zeros((2, 3, 3))) == 0.0
    assert channel_grad_norm(np.ones((2, 2, 2))) == pytest.approx(math.sqrt(8), abs=1e-15)


def test_channel_grad_norm_matches_flat_norm(rng):
    for _ in range(10):
        grad_slice = rng.standard_normal((4, 3, 3))
        assert abs(channel_grad_norm(grad_slice) - math.sqrt(float(np.sum(grad_slice ** 2)))) <= 1e-15 * 10


def test_frozen_channel_cannot_be_scored():
    with pytest.raises(UncomputedGradientError):
        channel_grad_norm(np.ones(4), computed=False)


def test_channel_rgn():
    assert channel_rgn(math.sqrt(8), ChannelCost(8, 25)) == pytest.approx(0.085710, abs=1e-6)
    assert channel_rgn(0.0, ChannelCost(8, 25)) == 0.0


def test_layer_rgn_from_two_channels():
    geom = ConvGeometry(2, 1, 1)
    grad = np.array([3.0, 4.0]).reshape(geom.weight_shape)
    assert layer_rgn(grad, np.array([True, True]), geom, ChannelCost(5, 5)) == pytest.approx(0.7, abs=1e-15)
    assert layer_rgn(np.zeros(geom.weight_shape), np.array([True, True]), geom, ChannelCost(5, 5)) == 0.0


def test_layer_rgn_needs_all_channels():
    geom = ConvGeometry(2, 1, 1)
    with pytest.raises(UncomputedGradientError):
        layer_rgn(np.ones(geom.weight_shape), np.array([True, False]), geom, ChannelCost(5, 5))


def test_channel_norms_frozen_policy():
    geom = ConvGeometry(2, 1, 1)
    grad = np.array([3.0, 0.0]).reshape(geom.weight_shape)
    assert channel_norms(grad, np.array([True, False]), geom, allow_frozen=True).tolist() == [3.0, 0.0]
    with pytest.raises(UncomputedGradientError):
        channel_norms(grad, np.array([True, False]), geom)


def test_cumulative_curve():
    curve = cumulative_rgn_curve([0.5, 0.3, 0.15, 0.05])
    assert [k for k, _ in curve] == [1, 2, 3, 4]
    assert np.allclose([f for _, f in curve], [0.5, 0.8, 0.95, 1.0], atol=1e-15)


def test_uniform_curve():
    curve = cumulative_rgn_curve(np.full(5, 0.2))
    assert np.allclose([f for _, f in curve], [k / 5 for k in range(1, 6)], atol=1e-15)


def test_curve_matches_sort_and_prefix_sum(rng):
    for _ in range(20):
        values = rng.random(int(rng.integers(2, 12)))
        expected = np.cumsum(np.sort(values)[::-1]) / values.sum()
        curve = [f for _, f in cumulative_rgn_curve(values)]
        assert np.allclose(curve, expected, atol=1e-12)
        assert all(a <= b for a, b in zip(curve, curve[1:]))
        assert curve[-1] == 1.0


def test_curve_rejects_zero_profile():
    with pytest.raises(StatisticsError):
        cumulative_rgn_curve([0.0, 0.0])


def test_rank_layers_breaks_ties_by_position():
    assert rank_layers([1.0, 3.0, 1.0, 3.0]) == [1, 3, 0, 2]


def _full_gradients(spec, params, rng):
    batch = rng.standard_normal((4, 1, 8, 8))
    logits, cache = forward(spec, params, batch, full_mask(spec))
    _, dlogits = softmax_cross_entropy(logits, rng.integers(0, 3, 4))
    return backward(spec, params, cache, dlogits, full_mask(spec), MacCounter())


def test_channel_scores_raw_and_rgn(residual_net, residual_params, rng):
    table = build_cost_table(residual_net)
    grads = _full_gradients(residual_net, residual_params, rng)
    raw = channel_scores(residual_net, grads, table, "raw")
    rgn = channel_scores(residual_net, grads, table, "rgn")
    for i in residual_net.conv_layers:
        assert np.allclose(rgn[i], raw[i] / table.cost(i).total, rtol=1e-15, atol=0)
    with pytest.raises(ValueError):
        channel_scores(residual_net, grads, table, "l1")


def test_profile_sums_layer_rgn(residual_net, residual_params, rng):
    """A full-gradient pass adds exactly each layer's RGN."""
    table = build_cost_table(residual_net)
    grads = _full_gradients(residual_net, residual_params, rng)
    profile = LayerRgnProfile.empty(table)
    profile.accumulate(residual_net, grads, table)
    for pos, i in enumerate(profile.layer_indices):
        conv_grad = grads.conv[i]
        expected = layer_rgn(conv_grad.grad, conv_grad.computed, residual_net.layers[i].geom, table.cost(i))
        assert profile.rgn[pos] == pytest.approx(expected, rel=1e-12)
    assert profile.passes == 1
    assert profile.channel_vector().size == sum(lc.channels for lc in table.layers.values())


def test_full_mask_profile_goes_through_layer_rgn(monkeypatch, residual_net, residual_params, rng):
    import src.metrics as metrics
    calls = []
    real = metrics.layer_rgn

    def counting(grad, computed, geom, cost, norms=None):
        calls.append(geom)
        return real(grad, computed, geom, cost, norms)

    monkeypatch.setattr(metrics, "layer_rgn", counting)
    table = build_cost_table(residual_net)
    profile = LayerRgnProfile.empty(table)
    profile.accumulate(residual_net, _full_gradients(residual_net, residual_params, rng), table)
    assert len(calls) == len(table.layer_indices)


def test_profile_skips_frozen_channels(residual_net, residual_params, rng):
    table = build_cost_table(residual_net)
    mask = random_mask(residual_net, rng, p=0.3)
    batch = rng.standard_normal((2, 1, 8, 8))
    logits, cache = forward(residual_net, residual_params, batch, mask)
    _, dlogits = softmax_cross_entropy(logits, [1, 2])
    grads = backward(residual_net, residual_params, cache, dlogits, mask, MacCounter())
    profile = LayerRgnProfile.empty(table)
    profile.accumulate(residual_net, grads, table)
    for i in residual_net.conv_layers:
        assert np.all(profile.channel_raw[i][~mask[i]] == 0.0)


def test_profile_dict_round_trip(residual_net, residual_params, rng):
    table = build_cost_table(residual_net)
    profile = LayerRgnProfile.empty(table)
    profile.accumulate(residual_net, _full_gradients(residual_net, residual_params, rng), table)
    restored = LayerRgnProfile.from_dict(profile.to_dict())
    assert restored.layer_indices == profile.layer_indices
    assert np.array_equal(restored.rgn, profile.rgn)
    assert np.array_equal(restored.channel_vector(), profile.channel_vector())
    assert restored.passes == 1


def test_channel_rgn_scales_with_gradient():
    grad = np.array([3.0, 4.0])
    cost = ChannelCost(2, 3)
    assert channel_rgn(channel_grad_norm(grad), cost) == 1.0
    assert channel_rgn(channel_grad_norm(3.0 * grad), cost) == 3.0


def _all_channel_rgn(spec, grads, table, scale=1.0, cost_factor=1):
    values = []
    for i in spec.conv_layers:
        conv_grad = grads.conv[i]
        cost = table.cost(i)
        cost = ChannelCost(cost.weight_slots * cost_factor, cost.activation_slots * cost_factor)
        norms = channel_norms(scale * conv_grad.grad, conv_grad.computed, spec.layers[i].geom)
        values.extend(channel_rgn(n, cost) for n in norms)
    return np.array(values)


def test_rgn_ranking_ignores_gradient_scale(residual_net, residual_params, rng):
    table = build_cost_table(residual_net)
    grads = _full_gradients(residual_net, residual_params, rng)
    base = _all_channel_rgn(residual_net, grads, table)
    for scale in (3.0, 0.01, 250.0):
        scaled = _all_channel_rgn(residual_net, grads, table, scale=scale)
        assert np.allclose(scaled, scale * base, rtol=1e-13, atol=0)
        assert np.array_equal(np.argsort(-scaled, kind="stable"), np.argsort(-base, kind="stable"))


def test_rgn_scales_inversely_with_cost(residual_net, residual_params, rng):
    table = build_cost_table(residual_net)
    grads = _full_gradients(residual_net, residual_params, rng)
    base = _all_channel_rgn(residual_net, grads, table)
    for factor in (2, 7):
        scaled = _all_channel_rgn(residual_net, grads, table, cost_factor=factor)
        assert np.allclose(scaled, base / factor, rtol=1e-14, atol=0)
        assert np.array_equal(np.argsort(-scaled, kind="stable"), np.argsort(-base, kind="stable"))


def test_curve_ignores_layer_order(rng):
    for _ in range(20):
        values = rng.random(int(rng.integers(2, 12)))
        shuffled = values[rng.permutation(values.size)]
        assert [f for _, f in cumulative_rgn_curve(shuffled)] == [f for _, f in cumulative_rgn_curve(values)]
