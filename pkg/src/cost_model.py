"""
Per-channel space and time costs of weight-gradient computation.

One memory slot is one stored scalar. Activation costs are per sample, so
budgets do not depend on batch size. "FLOPs" in every report means MACs.
"""
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Tuple

import numpy as np

from src.errors import ConfigError, CounterMismatch, MaskError
from src.network import NetworkSpec
from src.tensor_ops import ConvGeometry


@dataclass(frozen=True)
class ChannelCost:
    """Slots needed to update one input channel: its weights and its stored activation."""
    weight_slots: int
    activation_slots: int

    @property
    def total(self) -> int:
        return self.weight_slots + self.activation_slots


def channel_cost(geom: ConvGeometry, input_hw: Tuple[int, int]) -> ChannelCost:
    """weight (C'/g) D^2, activation H W."""
    height, width = input_hw
    return ChannelCost(geom.out_per_group * geom.kernel * geom.kernel, height * width)


def channel_macs(geom: ConvGeometry, output_hw: Tuple[int, int]) -> int:
    """Per-sample MACs for one input channel's weight gradient: D^2 (C'/g) H' W'."""
    out_h, out_w = output_hw
    return geom.kernel * geom.kernel * geom.out_per_group * out_h * out_w


@dataclass(frozen=True)
class LayerCost:
    layer: int
    channels: int
    cost: ChannelCost
    macs: int


@dataclass(frozen=True)
class ChannelCostTable:
    """Costs of every conv layer of a network; uniform within a layer."""
    layers: Dict[int, LayerCost]

    @property
    def layer_indices(self) -> Tuple[int, ...]:
        return tuple(sorted(self.layers))

    def cost(self, layer: int) -> ChannelCost:
        return self.layers[layer].cost

    @property
    def total_weight_slots(self) -> int:
        return sum(lc.channels * lc.cost.weight_slots for lc in self.layers.values())

    @property
    def total_activation_slots(self) -> int:
        return sum(lc.channels * lc.cost.activation_slots for lc in self.layers.values())

    @property
    def total_slots(self) -> int:
        return self.total_weight_slots + self.total_activation_slots

    @property
    def total_macs(self) -> int:
        return sum(lc.channels * lc.macs for lc in self.layers.values())

    def pool_slots(self, pool) -> int:
        return sum(self.layers[i].channels * self.layers[i].cost.total for i in pool)


def build_cost_table(spec: NetworkSpec) -> ChannelCostTable:
    layers = {}
    for i in spec.conv_layers:
        geom = spec.layers[i].geom
        layers[i] = LayerCost(i, geom.in_channels, channel_cost(geom, spec.input_hw(i)),
                              channel_macs(geom, spec.output_hw(i)))
    return ChannelCostTable(layers)


@dataclass(frozen=True)
class Budget:
    """Memory budget in slots."""
    limit: int

    def __post_init__(self):
        if self.limit < 0:
            raise ConfigError(f"budget must be >= 0, got {self.limit}")

    @classmethod
    def from_fraction(cls, table: ChannelCostTable, fraction: float) -> 'Budget':
        return cls(int(math.floor(fraction * table.total_slots)))


@dataclass(frozen=True)
class SelectionCost:
    slots: int
    macs_per_sample: int
    weight_slots: int
    activation_slots: int
    channels: int


def selection_cost(mask: Mapping[int, np.ndarray], table: ChannelCostTable) -> SelectionCost:
    """Sum of per-channel costs over the selected channels."""
    weight = activation = macs = count = 0
    for i, lc in table.layers.items():
        if i not in mask:
            raise MaskError(f"mask has no entry for conv layer {i}")
        if np.shape(mask[i]) != (lc.channels,):
            raise MaskError(f"mask for layer {i} has shape {np.shape(mask[i])}, expected ({lc.channels},)")
        n = int(np.count_nonzero(mask[i]))
        weight += n * lc.cost.weight_slots
        activation += n * lc.cost.activation_slots
        macs += n * lc.macs
        count += n
    return SelectionCost(weight + activation, macs, weight, activation, count)


@dataclass(frozen=True)
class SparsityReport:
    weight_sparsity: float
    activation_sparsity: float
    macs_saved_fraction: float
    selected_macs: int


def sparsity_report(mask: Mapping[int, np.ndarray], table: ChannelCostTable,
                    instrumented_macs: int, batch_size: int) -> SparsityReport:
    """
    Sparsities relative to full fine-tuning. The MACs counted during the
    actual backward pass must equal the analytic selected MACs times the
    batch size, exactly.
    """
    cost = selection_cost(mask, table)
    analytic = cost.macs_per_sample * batch_size
    if instrumented_macs != analytic:
        raise CounterMismatch(instrumented_macs, analytic)
    return SparsityReport(
        weight_sparsity=1.0 - cost.weight_slots / table.total_weight_slots,
        activation_sparsity=1.0 - cost.activation_slots / table.total_activation_slots,
        macs_saved_fraction=1.0 - cost.macs_per_sample / table.total_macs,
        selected_macs=analytic,
    )
