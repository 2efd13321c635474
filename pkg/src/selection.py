"""
Channel selection strategies under a memory-slot budget.

Random fill over a layer pool (the dynamic top-K variant is TraDy),
deterministic score-based fill, top-K layer pools, epsilon thresholding,
and the static/dynamic schedule that ties them to epochs.
"""
import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from src.cost_model import Budget, ChannelCostTable, selection_cost
from src.errors import BudgetViolation, MaskError, StatisticsError
from src.metrics import LayerRgnProfile, channel_scores, cumulative_rgn_curve, rank_layers
from src.network import GradientSet, NetworkSpec

logger = logging.getLogger(__name__)


class SelectionMask(Mapping):
    """
    Boolean vector over input channels for every conv layer, with its
    slot and MAC totals. Read-only once built.
    """

    def __init__(self, channels: Dict[int, np.ndarray], table: ChannelCostTable, cost_checks: int = 0):
        frozen = {}
        for i in table.layer_indices:
            vector = np.array(channels.get(i, np.zeros(table.layers[i].channels, dtype=bool)), dtype=bool)
            if vector.shape != (table.layers[i].channels,):
                raise MaskError(f"mask for layer {i} has shape {vector.shape}, "
                                f"expected ({table.layers[i].channels},)")
            vector.setflags(write=False)
            frozen[i] = vector
        extra = set(channels) - set(frozen)
        if extra:
            raise MaskError(f"mask names layers {sorted(extra)} that are not conv layers")
        self._channels = frozen
        cost = selection_cost(frozen, table)
        self.slots = cost.slots
        self.macs_per_sample = cost.macs_per_sample
        self.weight_slots = cost.weight_slots
        self.activation_slots = cost.activation_slots
        self.channel_count = cost.channels
        self.cost_checks = cost_checks

    def __getitem__(self, layer: int) -> np.ndarray:
        return self._channels[layer]

    def __iter__(self) -> Iterator[int]:
        return iter(self._channels)

    def __len__(self) -> int:
        return len(self._channels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SelectionMask):
            return NotImplemented
        return self._channels.keys() == other._channels.keys() and all(
            np.array_equal(self._channels[i], other._channels[i]) for i in self._channels)

    __hash__ = None

    def selected(self) -> Dict[int, list]:
        """{layer_index: [channel indices]} for every conv layer."""
        return {i: np.flatnonzero(v).tolist() for i, v in self._channels.items()}

    def to_json(self) -> str:
        return json.dumps({str(i): chans for i, chans in self.selected().items()}, sort_keys=False)

    @classmethod
    def from_selected(cls, selected: Mapping, table: ChannelCostTable) -> 'SelectionMask':
        channels = {}
        for key, indices in selected.items():
            i = int(key)
            if i not in table.layers:
                raise MaskError(f"layer {i} is not a conv layer")
            vector = np.zeros(table.layers[i].channels, dtype=bool)
            vector[np.asarray(indices, dtype=np.int64)] = True
            channels[i] = vector
        return cls(channels, table)

    @classmethod
    def from_json(cls, text: str, table: ChannelCostTable) -> 'SelectionMask':
        return cls.from_selected(json.loads(text), table)

    @classmethod
    def full(cls, table: ChannelCostTable) -> 'SelectionMask':
        return cls({i: np.ones(lc.channels, dtype=bool) for i, lc in table.layers.items()}, table)

    @classmethod
    def empty(cls, table: ChannelCostTable) -> 'SelectionMask':
        return cls({}, table)


LayerPool = Tuple[int, ...]


def check_pool(pool: Sequence[int], table: ChannelCostTable) -> LayerPool:
    pool = tuple(int(i) for i in pool)
    if not pool:
        raise MaskError("layer pool is empty")
    unknown = [i for i in pool if i not in table.layers]
    if unknown:
        raise MaskError(f"layer pool names non-conv layers {unknown}")
    return pool


def _pool_pairs(pool: LayerPool, table: ChannelCostTable) -> np.ndarray:
    """All (layer, channel) pairs of the pool, layer-major."""
    pairs = [(i, c) for i in sorted(pool) for c in range(table.layers[i].channels)]
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _greedy_fill(pairs: np.ndarray, table: ChannelCostTable, budget: Budget) -> SelectionMask:
    """
    Scan pairs in order, taking each channel whose cost still fits and
    skipping those that would overflow.
    """
    channels = {i: np.zeros(lc.channels, dtype=bool) for i, lc in table.layers.items()}
    remaining = budget.limit
    checks = 0
    for layer, channel in pairs:
        checks += 1
        cost = table.layers[int(layer)].cost.total
        if cost <= remaining:
            channels[int(layer)][int(channel)] = True
            remaining -= cost
    return SelectionMask(channels, table, cost_checks=checks)


def sample_random_fill(pool: Sequence[int], table: ChannelCostTable, budget: Budget,
                       rng: np.random.Generator) -> SelectionMask:
    """
    Uniform random permutation of the pool's channels, filled greedily
    under the budget. Reproducible for a given generator state.
    """
    pairs = _pool_pairs(check_pool(pool, table), table)
    order = rng.permutation(len(pairs))
    return _greedy_fill(pairs[order], table, budget)


def select_by_score(scores: Mapping[int, np.ndarray], table: ChannelCostTable, budget: Budget,
                    pool: Sequence[int]) -> SelectionMask:
    """Highest score first (ties by layer, then channel), same fill rule."""
    pairs = _pool_pairs(check_pool(pool, table), table)
    for i in set(pairs[:, 0].tolist()):
        if i not in scores or np.shape(scores[i]) != (table.layers[i].channels,):
            raise MaskError(f"missing channel scores for layer {i}")
    values = np.array([scores[int(i)][int(c)] for i, c in pairs])
    # pairs are already in (layer, channel) order, so a stable sort keeps the tie rule
    order = np.argsort(-values, kind="stable")
    return _greedy_fill(pairs[order], table, budget)


def top_k_layers(profile: LayerRgnProfile, theta: float, values: Optional[np.ndarray] = None) -> LayerPool:
    """
    Smallest set of highest-RGN layers whose cumulative share reaches theta.
    Zero-valued layers are never included.
    """
    values = profile.rgn if values is None else np.asarray(values, dtype=np.float64)
    if not 0.0 < theta <= 1.0:
        raise StatisticsError(f"theta must be in (0, 1], got {theta}")
    curve = cumulative_rgn_curve(values)
    order = rank_layers(values)
    # shares are sums of floats; 0.6 + 0.3 must still reach 0.9
    k = next(k for k, fraction in curve if fraction >= theta - 1e-12)
    positions = [pos for pos in order[:k] if values[pos] > 0]
    return tuple(profile.layer_indices[pos] for pos in positions)


def layer_pool_from_ranking(profile: LayerRgnProfile, k: int, metric: str = "rgn") -> LayerPool:
    """The k highest layers of the profile by RGN or by raw norm."""
    values = profile.rgn if metric == "rgn" else profile.raw
    if not 1 <= k <= len(profile.layer_indices):
        raise StatisticsError(f"k must be in [1, {len(profile.layer_indices)}], got {k}")
    return tuple(profile.layer_indices[pos] for pos in rank_layers(values)[:k])


def threshold_mask(scores: Mapping[int, np.ndarray], eps: float, table: ChannelCostTable) -> SelectionMask:
    """Select every channel whose score is at least eps. Not budget-constrained."""
    channels = {}
    for i in table.layer_indices:
        if i not in scores:
            raise MaskError(f"missing channel scores for layer {i}")
        channels[i] = np.asarray(scores[i]) >= eps
    return SelectionMask(channels, table)


class StrategyKind(Enum):
    FULL_RANDOM = "full_random"
    TOPK_RANDOM = "topk_random"
    DET_RGN = "det_rgn"
    DET_RAW_NORM = "det_raw_norm"
    THRESHOLD = "threshold"
    FULL = "full"
    CLASSIFIER_ONLY = "classifier_only"

    @property
    def needs_gradients(self) -> bool:
        return self in (StrategyKind.DET_RGN, StrategyKind.DET_RAW_NORM, StrategyKind.THRESHOLD)

    @property
    def budgeted(self) -> bool:
        return self in (StrategyKind.FULL_RANDOM, StrategyKind.TOPK_RANDOM,
                        StrategyKind.DET_RGN, StrategyKind.DET_RAW_NORM)


class SelectionMode(Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass
class StrategyState:
    """
    Everything a strategy needs across epochs. Static mode caches the
    first mask and returns it verbatim afterwards.
    """
    kind: StrategyKind
    mode: SelectionMode
    pool: LayerPool
    budget: Budget
    rng: np.random.Generator
    eps: float = 0.0
    metric: str = "rgn"
    cached: Optional[SelectionMask] = field(default=None, repr=False)

    @property
    def label(self) -> str:
        return f"{self.mode.value[0].upper()}-{self.kind.value}"


def strategy_step(state: StrategyState, epoch: int, table: ChannelCostTable,
                  spec: Optional[NetworkSpec] = None,
                  profiling_grads: Optional[GradientSet] = None) -> SelectionMask:
    """Mask for this epoch."""
    if state.mode is SelectionMode.STATIC and state.cached is not None:
        return state.cached

    kind = state.kind
    if kind.needs_gradients and (profiling_grads is None or spec is None):
        raise MaskError(f"strategy {kind.value} needs a full-gradient profiling pass")

    if kind is StrategyKind.FULL:
        mask = SelectionMask.full(table)
    elif kind is StrategyKind.CLASSIFIER_ONLY:
        mask = SelectionMask.empty(table)
    elif kind in (StrategyKind.FULL_RANDOM, StrategyKind.TOPK_RANDOM):
        mask = sample_random_fill(state.pool, table, state.budget, state.rng)
    elif kind in (StrategyKind.DET_RGN, StrategyKind.DET_RAW_NORM):
        metric = "rgn" if kind is StrategyKind.DET_RGN else "raw"
        mask = select_by_score(channel_scores(spec, profiling_grads, table, metric), table, state.budget, state.pool)
    else:
        mask = threshold_mask(channel_scores(spec, profiling_grads, table, state.metric), state.eps, table)

    if kind.budgeted and mask.slots > state.budget.limit:
        raise BudgetViolation(mask.slots, state.budget.limit, f"{state.label} epoch {epoch}")
    logger.debug("[Select] %s epoch %d: %d channels, %d slots", state.label, epoch, mask.channel_count, mask.slots)

    if state.mode is SelectionMode.STATIC:
        state.cached = mask
    return mask
