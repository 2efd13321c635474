"""
Declarative CNN construction, forward/backward with channel-masked weight
gradients, plain SGD and the cosine learning-rate schedule.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from src.errors import ConfigError, MaskError, ShapeError
from src.tensor_ops import (
    ConvGeometry, MacCounter, as_tensor4, channel_weight_mask,
    conv2d_forward, conv2d_input_grad, conv2d_weight_grad_slices,
    global_avg_pool_backward, global_avg_pool_forward,
    linear_backward, linear_forward, relu_backward, relu_forward,
    residual_add_forward,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Conv:
    geom: ConvGeometry


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class ResidualBegin:
    tag: str


@dataclass(frozen=True)
class ResidualAdd:
    tag: str


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int


Layer = Union[Conv, ReLU, ResidualBegin, ResidualAdd, GlobalAvgPool, Linear]


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list ending in exactly one Linear classifier."""
    name: str
    input_shape: Tuple[int, int, int]
    layers: Tuple[Layer, ...]
    shapes: Tuple[tuple, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        object.__setattr__(self, 'input_shape', tuple(self.input_shape))
        object.__setattr__(self, 'shapes', self._propagate_shapes())

    def _propagate_shapes(self) -> Tuple[tuple, ...]:
        """Input shape of every layer, plus the final output shape."""
        if not self.layers or not isinstance(self.layers[-1], Linear):
            raise ShapeError(self.name, "last layer", "Linear classifier", type(self.layers[-1]).__name__
                             if self.layers else None)
        if sum(isinstance(layer, Linear) for layer in self.layers) != 1:
            raise ShapeError(self.name, "Linear layer count", 1,
                             sum(isinstance(layer, Linear) for layer in self.layers))

        shape = self.input_shape
        shapes = []
        open_blocks: Dict[str, tuple] = {}
        for index, layer in enumerate(self.layers):
            shapes.append(shape)
            where = f"{self.name} layer {index}"
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ShapeError(where, "input rank", 3, len(shape))
                if shape[0] != layer.geom.in_channels:
                    raise ShapeError(where, "input channels", layer.geom.in_channels, shape[0])
                out_h, out_w = layer.geom.output_hw(shape[1], shape[2])
                shape = (layer.geom.out_channels, out_h, out_w)
            elif isinstance(layer, ResidualBegin):
                if layer.tag in open_blocks:
                    raise ShapeError(where, "residual tag", "unused tag", layer.tag)
                open_blocks[layer.tag] = shape
            elif isinstance(layer, ResidualAdd):
                if layer.tag not in open_blocks:
                    raise ShapeError(where, "residual tag", "an open ResidualBegin", layer.tag)
                begin_shape = open_blocks.pop(layer.tag)
                if begin_shape != shape:
                    raise ShapeError(where, "residual shape", begin_shape, shape)
            elif isinstance(layer, GlobalAvgPool):
                if len(shape) != 3:
                    raise ShapeError(where, "input rank", 3, len(shape))
                shape = (shape[0],)
            elif isinstance(layer, Linear):
                if shape != (layer.in_features,):
                    raise ShapeError(where, "classifier input", (layer.in_features,), shape)
                shape = (layer.out_features,)
        if open_blocks:
            raise ShapeError(self.name, "residual blocks", "all closed", sorted(open_blocks))
        shapes.append(shape)
        return tuple(shapes)

    @property
    def conv_layers(self) -> Tuple[int, ...]:
        return tuple(i for i, layer in enumerate(self.layers) if isinstance(layer, Conv))

    @property
    def classifier_index(self) -> int:
        return len(self.layers) - 1

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_features

    def input_hw(self, index: int) -> Tuple[int, int]:
        """Spatial size of the input of layer `index`."""
        shape = self.shapes[index]
        return shape[1], shape[2]

    def output_hw(self, index: int) -> Tuple[int, int]:
        shape = self.shapes[index + 1]
        return shape[1], shape[2]


def toynet_residual(input_shape: Tuple[int, int, int], num_classes: int) -> NetworkSpec:
    """
    conv3x3(C_in->8) - ReLU - [ResidualBegin - dw3x3(8) - ReLU - conv1x1(8->8) - ResidualAdd] x2
    - conv3x3(8->16, stride 2) - ReLU - GAP - Linear(16->K)
    """
    layers: List[Layer] = [Conv(ConvGeometry(input_shape[0], 8, 3, padding=1)), ReLU()]
    for block in range(2):
        tag = f"block{block}"
        layers += [
            ResidualBegin(tag),
            Conv(ConvGeometry(8, 8, 3, padding=1, groups=8)),
            ReLU(),
            Conv(ConvGeometry(8, 8, 1)),
            ResidualAdd(tag),
        ]
    layers += [
        Conv(ConvGeometry(8, 16, 3, stride=2, padding=1)),
        ReLU(),
        GlobalAvgPool(),
        Linear(16, num_classes),
    ]
    return NetworkSpec("toynet-residual", input_shape, tuple(layers))


def toynet_2layer(input_shape: Tuple[int, int, int], num_classes: int) -> NetworkSpec:
    """conv3x3(C_in->4) - ReLU - conv3x3(4->6) - ReLU - GAP - Linear(6->K)"""
    layers = (
        Conv(ConvGeometry(input_shape[0], 4, 3, padding=1)),
        ReLU(),
        Conv(ConvGeometry(4, 6, 3, padding=1)),
        ReLU(),
        GlobalAvgPool(),
        Linear(6, num_classes),
    )
    return NetworkSpec("toynet-2layer", input_shape, layers)


NETWORKS = {
    "toynet-residual": toynet_residual,
    "toynet-2layer": toynet_2layer,
}


def build_network(name: str, input_shape: Tuple[int, int, int], num_classes: int) -> NetworkSpec:
    """Look up a reference network by name."""
    if name not in NETWORKS:
        raise ConfigError(f"unknown network '{name}', expected one of {sorted(NETWORKS)}")
    return NETWORKS[name](tuple(input_shape), num_classes)


@dataclass
class Parameters:
    """Conv kernels keyed by layer index, plus the classifier weight and bias."""
    conv: Dict[int, np.ndarray]
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray

    def copy(self) -> 'Parameters':
        return Parameters(
            conv={i: w.copy() for i, w in self.conv.items()},
            classifier_weight=self.classifier_weight.copy(),
            classifier_bias=self.classifier_bias.copy(),
        )

    def to_tensors(self) -> Dict[str, np.ndarray]:
        """Named tensors in a stable order (checkpoint layout)."""
        tensors = {f"layer{i}.weight": self.conv[i] for i in sorted(self.conv)}
        tensors["classifier.weight"] = self.classifier_weight
        tensors["classifier.bias"] = self.classifier_bias
        return tensors

    @classmethod
    def from_tensors(cls, spec: NetworkSpec, tensors: Mapping[str, np.ndarray]) -> 'Parameters':
        conv = {}
        for i in spec.conv_layers:
            name = f"layer{i}.weight"
            if name not in tensors:
                raise ShapeError(spec.name, "missing tensor", name, None)
            conv[i] = np.array(tensors[name], dtype=np.float64)
        params = cls(conv,
                     np.array(tensors["classifier.weight"], dtype=np.float64),
                     np.array(tensors["classifier.bias"], dtype=np.float64))
        check_parameters(spec, params)
        return params


def check_parameters(spec: NetworkSpec, params: Parameters):
    """Shapes must match the NetworkSpec."""
    for i in spec.conv_layers:
        expected = spec.layers[i].geom.weight_shape
        if i not in params.conv:
            raise ShapeError(f"{spec.name} layer {i}", "weights", expected, None)
        if params.conv[i].shape != expected:
            raise ShapeError(f"{spec.name} layer {i}", "weight shape", expected, params.conv[i].shape)
    head = spec.layers[-1]
    if params.classifier_weight.shape != (head.out_features, head.in_features):
        raise ShapeError(spec.name, "classifier weight shape", (head.out_features, head.in_features),
                         params.classifier_weight.shape)
    if params.classifier_bias.shape != (head.out_features,):
        raise ShapeError(spec.name, "classifier bias shape", (head.out_features,), params.classifier_bias.shape)


def init_classifier(spec: NetworkSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    head = spec.layers[-1]
    bound = 1.0 / math.sqrt(head.in_features)
    weight = rng.uniform(-bound, bound, size=(head.out_features, head.in_features))
    return weight, np.zeros(head.out_features)


def init_parameters(spec: NetworkSpec, rng: np.random.Generator) -> Parameters:
    """He-normal conv kernels (fan-in C/g * D * D), uniform classifier."""
    conv = {}
    for i in spec.conv_layers:
        geom = spec.layers[i].geom
        fan_in = geom.in_per_group * geom.kernel * geom.kernel
        conv[i] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=geom.weight_shape)
    weight, bias = init_classifier(spec, rng)
    return Parameters(conv, weight, bias)


def full_mask(spec: NetworkSpec) -> Dict[int, np.ndarray]:
    return {i: np.ones(spec.layers[i].geom.in_channels, dtype=bool) for i in spec.conv_layers}


def empty_mask(spec: NetworkSpec) -> Dict[int, np.ndarray]:
    return {i: np.zeros(spec.layers[i].geom.in_channels, dtype=bool) for i in spec.conv_layers}


def check_mask(spec: NetworkSpec, mask: Mapping[int, np.ndarray]):
    for i in spec.conv_layers:
        if i not in mask:
            raise MaskError(f"mask has no entry for conv layer {i}")
        channels = spec.layers[i].geom.in_channels
        if np.shape(mask[i]) != (channels,):
            raise MaskError(f"mask for layer {i} has shape {np.shape(mask[i])}, expected ({channels},)")


@dataclass
class ActivationCache:
    """
    What forward keeps for backward. Conv layers keep only the selected
    input-channel slices; stored_slots counts them per sample.
    """
    batch_size: int
    conv_inputs: Dict[int, np.ndarray] = field(default_factory=dict)
    conv_channels: Dict[int, np.ndarray] = field(default_factory=dict)
    relu_active: Dict[int, np.ndarray] = field(default_factory=dict)
    pool_hw: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    classifier_input: Optional[np.ndarray] = None
    stored_slots: int = 0


@dataclass
class ConvGrad:
    grad: np.ndarray
    computed: np.ndarray


@dataclass
class GradientSet:
    """Per-layer weight gradients; unselected conv channels are exactly zero."""
    conv: Dict[int, ConvGrad]
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray
    wgrad_macs: int = 0


def forward(spec: NetworkSpec, params: Parameters, batch, mask: Mapping[int, np.ndarray]
            ) -> Tuple[np.ndarray, ActivationCache]:
    """
    Dense forward pass. The mask only decides which conv inputs are cached;
    logits never depend on it.
    """
    x = as_tensor4(batch, "network input")
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(spec.name, "input shape", spec.input_shape, x.shape[1:])
    check_mask(spec, mask)

    cache = ActivationCache(batch_size=x.shape[0])
    skips: Dict[str, np.ndarray] = {}
    for index, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            channels = np.flatnonzero(mask[index])
            cache.conv_channels[index] = channels
            cache.conv_inputs[index] = x[:, channels].copy()
            cache.stored_slots += channels.size * x.shape[2] * x.shape[3]
            x = conv2d_forward(x, params.conv[index], layer.geom)
        elif isinstance(layer, ReLU):
            x, cache.relu_active[index] = relu_forward(x)
        elif isinstance(layer, ResidualBegin):
            skips[layer.tag] = x
        elif isinstance(layer, ResidualAdd):
            x = residual_add_forward(x, skips.pop(layer.tag))
        elif isinstance(layer, GlobalAvgPool):
            x, cache.pool_hw[index] = global_avg_pool_forward(x)
        elif isinstance(layer, Linear):
            cache.classifier_input = x
            x = linear_forward(x, params.classifier_weight, params.classifier_bias)
    return x, cache


def shallowest_selected(spec: NetworkSpec, mask: Mapping[int, np.ndarray]) -> Optional[int]:
    """Lowest conv layer index with any selected channel, or None."""
    for i in spec.conv_layers:
        if np.any(mask[i]):
            return i
    return None


def backward(spec: NetworkSpec, params: Parameters, cache: ActivationCache, dlogits: np.ndarray,
             mask: Mapping[int, np.ndarray], counter: Optional[MacCounter] = None) -> GradientSet:
    """
    Classifier gradients always; conv weight gradients only for selected
    input channels. Activation derivatives are propagated densely down to
    the shallowest layer with a selected channel and no further.
    """
    counter = counter if counter is not None else MacCounter()
    check_mask(spec, mask)
    for i in spec.conv_layers:
        if not np.array_equal(cache.conv_channels.get(i), np.flatnonzero(mask[i])):
            raise MaskError(f"cache for layer {i} was built with a different mask")

    dx, d_weight, d_bias = linear_backward(cache.classifier_input, params.classifier_weight, dlogits)
    conv_grads = {}
    for i in spec.conv_layers:
        geom = spec.layers[i].geom
        conv_grads[i] = ConvGrad(np.zeros(geom.weight_shape), np.zeros(geom.in_channels, dtype=bool))

    stop = shallowest_selected(spec, mask)
    start_macs = counter.value
    if stop is not None:
        pending: Dict[str, np.ndarray] = {}
        dy = dx
        for index in range(spec.classifier_index - 1, stop - 1, -1):
            layer = spec.layers[index]
            if isinstance(layer, GlobalAvgPool):
                dy = global_avg_pool_backward(cache.pool_hw[index], dy)
            elif isinstance(layer, ReLU):
                dy = relu_backward(cache.relu_active[index], dy)
            elif isinstance(layer, ResidualAdd):
                pending[layer.tag] = dy
            elif isinstance(layer, ResidualBegin):
                dy = dy + pending.pop(layer.tag)
            elif isinstance(layer, Conv):
                grad, computed = conv2d_weight_grad_slices(
                    cache.conv_inputs[index], cache.conv_channels[index], dy, layer.geom, counter)
                conv_grads[index] = ConvGrad(grad, computed)
                if index > stop:
                    dy = conv2d_input_grad(params.conv[index], dy, layer.geom, spec.input_hw(index))

    return GradientSet(conv_grads, d_weight, d_bias, wgrad_macs=counter.value - start_macs)


def sgd_step(spec: NetworkSpec, params: Parameters, grads: GradientSet, lr: float) -> Parameters:
    """
    w <- w - lr * g, only where the gradient was computed. Frozen channel
    weights come back bit-identical. No momentum, no weight decay.
    """
    updated = params.copy()
    if lr == 0:
        return updated
    for i, conv_grad in grads.conv.items():
        if not conv_grad.computed.any():
            continue
        where = channel_weight_mask(conv_grad.computed, spec.layers[i].geom)
        updated.conv[i] = np.where(where, params.conv[i] - lr * conv_grad.grad, params.conv[i])
    updated.classifier_weight = params.classifier_weight - lr * grads.classifier_weight
    updated.classifier_bias = params.classifier_bias - lr * grads.classifier_bias
    return updated


def cosine_warmup_lr(epoch: int, total_epochs: int, warmup_epochs: int, lr_max: float) -> float:
    """
    Linear warmup 0 -> lr_max over [0, T_w], then half-cosine decay to 0.
    """
    if not 0 <= warmup_epochs < total_epochs:
        raise ConfigError(f"warmup epochs must satisfy 0 <= T_w < T, got T_w={warmup_epochs}, T={total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch < warmup_epochs:
        return lr_max * epoch / warmup_epochs
    progress = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * progress))
