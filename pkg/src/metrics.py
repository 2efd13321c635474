"""
Channel and layer gradient-norm metrics.
Raw channel norm, the reweighted gradient norm (RGN = norm / slot cost),
layer RGN and cumulative-contribution curves.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.cost_model import ChannelCost, ChannelCostTable
from src.errors import InvariantError, StatisticsError, UncomputedGradientError
from src.network import GradientSet, NetworkSpec
from src.tensor_ops import ConvGeometry, channel_slice


def channel_grad_norm(grad_slice: np.ndarray, computed: bool = True) -> float:
    """Euclidean norm of one input channel's weight-gradient slice."""
    if not computed:
        raise UncomputedGradientError("cannot score a frozen channel: its gradient was not computed")
    return float(np.linalg.norm(np.ravel(grad_slice)))


def channel_rgn(raw_norm: float, cost: ChannelCost) -> float:
    """raw_norm / (weight_slots + activation_slots)"""
    return raw_norm / cost.total


def channel_norms(grad: np.ndarray, computed: np.ndarray, geom: ConvGeometry,
                  allow_frozen: bool = False) -> np.ndarray:
    """
    Raw norm of every input channel of a layer. Frozen channels raise,
    unless allow_frozen is set, in which case they score 0.
    """
    norms = np.zeros(geom.in_channels)
    for c in range(geom.in_channels):
        if computed[c]:
            norms[c] = channel_grad_norm(channel_slice(grad, geom, c))
        elif not allow_frozen:
            raise UncomputedGradientError(f"channel {c} has no computed gradient")
    return norms


def layer_rgn(grad: np.ndarray, computed: np.ndarray, geom: ConvGeometry, cost: ChannelCost,
              norms: Optional[np.ndarray] = None) -> float:
    """
    Sum of channel RGNs of a fully computed layer. Costs are uniform in a
    layer, so this also equals (1 / cost) * sum of raw norms; both forms
    are evaluated and must agree.
    """
    if not np.all(computed):
        raise UncomputedGradientError("layer RGN needs every channel of the layer computed")
    if norms is None:
        norms = channel_norms(grad, computed, geom)
    by_channel = float(sum(channel_rgn(n, cost) for n in norms))
    by_layer = float(norms.sum()) / cost.total
    if abs(by_channel - by_layer) > 1e-12 * max(1.0, abs(by_layer)):
        raise InvariantError(f"layer RGN forms disagree: {by_channel} vs {by_layer}")
    return by_layer


def channel_scores(spec: NetworkSpec, grads: GradientSet, table: ChannelCostTable,
                   metric: str = "rgn") -> Dict[int, np.ndarray]:
    """Per-layer vectors of channel scores from a full-gradient pass."""
    if metric not in ("raw", "rgn"):
        raise ValueError(f"metric must be 'raw' or 'rgn', got '{metric}'")
    scores = {}
    for i in spec.conv_layers:
        conv_grad = grads.conv[i]
        norms = channel_norms(conv_grad.grad, conv_grad.computed, spec.layers[i].geom)
        scores[i] = norms if metric == "raw" else norms / table.cost(i).total
    return scores


@dataclass
class LayerRgnProfile:
    """
    Cumulative per-layer RGN and raw norm over the passes accumulated so
    far, plus the per-channel raw-norm accumulator (channel topology).
    """
    layer_indices: Tuple[int, ...]
    rgn: np.ndarray
    raw: np.ndarray
    channel_raw: Dict[int, np.ndarray] = field(default_factory=dict)
    passes: int = 0

    @classmethod
    def empty(cls, table: ChannelCostTable) -> 'LayerRgnProfile':
        layers = table.layer_indices
        return cls(layers, np.zeros(len(layers)), np.zeros(len(layers)),
                   {i: np.zeros(table.layers[i].channels) for i in layers})

    def accumulate(self, spec: NetworkSpec, grads: GradientSet, table: ChannelCostTable):
        """
        Add one gradient's channel norms. Frozen channels add nothing, so a
        budgeted run only accumulates what it actually computed.
        """
        for pos, i in enumerate(self.layer_indices):
            conv_grad = grads.conv[i]
            norms = channel_norms(conv_grad.grad, conv_grad.computed, spec.layers[i].geom, allow_frozen=True)
            self.channel_raw[i] += norms
            self.raw[pos] += norms.sum()
            if conv_grad.computed.all():
                self.rgn[pos] += layer_rgn(conv_grad.grad, conv_grad.computed, spec.layers[i].geom,
                                           table.cost(i), norms)
            else:
                self.rgn[pos] += norms.sum() / table.cost(i).total
        self.passes += 1

    def channel_vector(self) -> np.ndarray:
        return np.concatenate([self.channel_raw[i] for i in self.layer_indices])

    def to_dict(self) -> dict:
        return {
            'layer_indices': list(self.layer_indices),
            'rgn': self.rgn.tolist(),
            'raw': self.raw.tolist(),
            'channel_raw': {str(i): v.tolist() for i, v in self.channel_raw.items()},
            'passes': self.passes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'LayerRgnProfile':
        return cls(tuple(data['layer_indices']), np.array(data['rgn'], dtype=np.float64),
                   np.array(data['raw'], dtype=np.float64),
                   {int(k): np.array(v, dtype=np.float64) for k, v in data['channel_raw'].items()},
                   data.get('passes', 0))


def rank_layers(values) -> List[int]:
    """Positions sorted by value descending, ties by position ascending."""
    values = np.asarray(values, dtype=np.float64)
    return sorted(range(values.size), key=lambda pos: (-values[pos], pos))


def cumulative_rgn_curve(values) -> List[Tuple[int, float]]:
    """
    (k, fraction of the total captured by the k highest layers), k = 1..n.
    Fractions are nondecreasing and end at exactly 1.0.
    """
    values = np.asarray(values, dtype=np.float64)
    total = values.sum()
    if values.size == 0 or total <= 0:
        raise StatisticsError("cumulative RGN curve needs a profile with a positive total")
    order = rank_layers(values)
    curve = []
    running = 0.0
    for k, pos in enumerate(order, start=1):
        running += values[pos]
        curve.append((k, running / total))
    curve[-1] = (values.size, 1.0)
    return curve
