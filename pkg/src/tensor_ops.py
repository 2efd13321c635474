"""
Dense rank-4 tensor kernels for the training engine.
Convolution forward/backward (with the channel-masked weight derivative)
and the small layer primitives. Arrays are float64, laid out as
(batch, channel, height, width); convolution is cross-correlation.
"""
import threading
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from src.errors import ShapeError, MaskError

# Rank-4 float64 array, (batch, channel, height, width)
Tensor4 = np.ndarray


def as_tensor4(array, what: str = "tensor") -> np.ndarray:
    """Validate and convert to a contiguous rank-4 float64 array."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(what, "rank", 4, arr.ndim)
    return arr


@dataclass(frozen=True)
class ConvGeometry:
    """Square-kernel convolution geometry; depthwise is groups == C == C'."""
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.kernel < 1:
            raise ShapeError("ConvGeometry", "channels/kernel", ">= 1",
                             (self.in_channels, self.out_channels, self.kernel))
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ShapeError("ConvGeometry", "stride/dilation/padding", "stride>=1, dilation>=1, padding>=0",
                             (self.stride, self.dilation, self.padding))
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError("ConvGeometry", "groups", "a divisor of in and out channels", self.groups)

    @property
    def in_per_group(self) -> int:
        return self.in_channels // self.groups

    @property
    def out_per_group(self) -> int:
        return self.out_channels // self.groups

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_per_group, self.kernel, self.kernel)

    def output_hw(self, height: int, width: int) -> Tuple[int, int]:
        """H' = floor((H + 2 pad - dilation (D - 1) - 1) / stride) + 1, same for W'."""
        span = self.dilation * (self.kernel - 1) + 1
        out_h = (height + 2 * self.padding - span) // self.stride + 1
        out_w = (width + 2 * self.padding - span) // self.stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError("conv2d", "input height/width", f">= {span - 2 * self.padding}", (height, width))
        return out_h, out_w


class MacCounter:
    """Counts multiply-accumulates spent on weight-gradient computation."""

    def __init__(self):
        self._macs = 0
        self._lock = threading.Lock()

    def add(self, macs: int):
        with self._lock:
            self._macs += int(macs)

    @property
    def value(self) -> int:
        return self._macs

    def reset(self) -> int:
        """Zero the counter and return what it held."""
        with self._lock:
            macs, self._macs = self._macs, 0
        return macs


# Global instance
_mac_counter: Optional[MacCounter] = None


def get_mac_counter() -> MacCounter:
    """Get the global weight-gradient MAC counter."""
    global _mac_counter
    if _mac_counter is None:
        _mac_counter = MacCounter()
    return _mac_counter


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _window(x_padded: np.ndarray, k: int, l: int, geom: ConvGeometry, out_h: int, out_w: int) -> np.ndarray:
    """Input samples touched by kernel tap (k, l): x[h'*s + k*d, w'*s + l*d]."""
    h0 = k * geom.dilation
    w0 = l * geom.dilation
    return x_padded[:, :,
                    h0:h0 + geom.stride * (out_h - 1) + 1:geom.stride,
                    w0:w0 + geom.stride * (out_w - 1) + 1:geom.stride]


def _check_input(x: np.ndarray, geom: ConvGeometry, what: str):
    if x.shape[1] != geom.in_channels:
        raise ShapeError(what, "input channels", geom.in_channels, x.shape[1])


def _check_weights(weights: np.ndarray, geom: ConvGeometry, what: str):
    if weights.shape != geom.weight_shape:
        for name, expected, actual in zip(("out channels", "in channels per group", "kernel height", "kernel width"),
                                          geom.weight_shape, weights.shape):
            if expected != actual:
                raise ShapeError(what, f"weight {name}", expected, actual)
        raise ShapeError(what, "weight rank", 4, weights.ndim)


def _check_upstream(upstream: np.ndarray, batch: int, geom: ConvGeometry, out_hw: Tuple[int, int], what: str):
    expected = (batch, geom.out_channels) + tuple(out_hw)
    for name, e, a in zip(("batch", "output channels", "output height", "output width"), expected, upstream.shape):
        if e != a:
            raise ShapeError(what, f"upstream {name}", e, a)


def conv2d_forward(x, weights, geom: ConvGeometry) -> np.ndarray:
    """
    Grouped cross-correlation without bias.
    Returns (B, C', H', W').
    """
    x = as_tensor4(x, "conv2d_forward input")
    weights = as_tensor4(weights, "conv2d_forward weights")
    _check_input(x, geom, "conv2d_forward")
    _check_weights(weights, geom, "conv2d_forward")

    batch, _, height, width = x.shape
    out_h, out_w = geom.output_hw(height, width)
    g, cpg, opg, d = geom.groups, geom.in_per_group, geom.out_per_group, geom.kernel

    x_padded = _pad(x, geom.padding)
    w = weights.reshape(g, opg, cpg, d, d)
    out = np.zeros((batch, g, opg, out_h, out_w))
    for k in range(d):
        for l in range(d):
            win = _window(x_padded, k, l, geom, out_h, out_w).reshape(batch, g, cpg, out_h, out_w)
            out += np.einsum('bgchw,goc->bgohw', win, w[:, :, :, k, l])
    return out.reshape(batch, geom.out_channels, out_h, out_w)


def conv2d_weight_grad_slices(selected_input: np.ndarray, channels: np.ndarray, upstream: np.ndarray,
                              geom: ConvGeometry, counter: Optional[MacCounter] = None
                              ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Weight derivative for the listed input channels only.

    selected_input holds the (B, n, H, W) slices of those channels, in the
    order of `channels`. No arithmetic is spent on other channels; their
    gradient slices are exactly zero and flagged not computed.
    """
    counter = counter if counter is not None else get_mac_counter()
    channels = np.asarray(channels, dtype=np.int64)
    batch = upstream.shape[0]
    out_h, out_w = upstream.shape[2], upstream.shape[3]
    g, cpg, opg, d = geom.groups, geom.in_per_group, geom.out_per_group, geom.kernel

    grad = np.zeros((g, opg, cpg, d, d))
    flags = np.zeros(geom.in_channels, dtype=bool)
    n = channels.size
    if n == 0:
        return grad.reshape(geom.weight_shape), flags

    group_of = channels // cpg
    local = channels % cpg
    # Upstream of the filters each selected channel feeds: (B, n, C'/g, H', W')
    up = upstream.reshape(batch, g, opg, out_h, out_w)[:, group_of]
    x_padded = _pad(selected_input, geom.padding)

    grad_sel = np.empty((n, opg, d, d))
    for k in range(d):
        for l in range(d):
            win = _window(x_padded, k, l, geom, out_h, out_w)
            grad_sel[:, :, k, l] = np.einsum('bnohw,bnhw->no', up, win)
    counter.add(n * opg * d * d * out_h * out_w * batch)

    grad[group_of, :, local] = grad_sel
    flags[channels] = True
    return grad.reshape(geom.weight_shape), flags


def conv2d_weight_grad_masked(x, upstream, geom: ConvGeometry, mask,
                              counter: Optional[MacCounter] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    dL/dW restricted to input channels with mask[c] true.
    Returns (grad of shape (C', C/g, D, D), computed flags over C).
    """
    x = as_tensor4(x, "conv2d_weight_grad input")
    upstream = as_tensor4(upstream, "conv2d_weight_grad upstream")
    _check_input(x, geom, "conv2d_weight_grad")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (geom.in_channels,):
        raise MaskError(f"mask length {mask.size} does not match {geom.in_channels} input channels")
    out_hw = geom.output_hw(x.shape[2], x.shape[3])
    _check_upstream(upstream, x.shape[0], geom, out_hw, "conv2d_weight_grad")

    channels = np.flatnonzero(mask)
    return conv2d_weight_grad_slices(x[:, channels], channels, upstream, geom, counter)


def conv2d_input_grad(weights, upstream, geom: ConvGeometry, input_hw: Tuple[int, int]) -> np.ndarray:
    """
    dL/dx, the full transposed convolution of the upstream derivative.
    input_hw is needed because strided geometries lose the remainder rows.
    """
    weights = as_tensor4(weights, "conv2d_input_grad weights")
    upstream = as_tensor4(upstream, "conv2d_input_grad upstream")
    _check_weights(weights, geom, "conv2d_input_grad")
    height, width = input_hw
    out_h, out_w = geom.output_hw(height, width)
    batch = upstream.shape[0]
    _check_upstream(upstream, batch, geom, (out_h, out_w), "conv2d_input_grad")

    g, cpg, opg, d, p = geom.groups, geom.in_per_group, geom.out_per_group, geom.kernel, geom.padding
    w = weights.reshape(g, opg, cpg, d, d)
    up = upstream.reshape(batch, g, opg, out_h, out_w)
    grad_padded = np.zeros((batch, g, cpg, height + 2 * p, width + 2 * p))
    for k in range(d):
        for l in range(d):
            h0 = k * geom.dilation
            w0 = l * geom.dilation
            grad_padded[:, :, :,
                        h0:h0 + geom.stride * (out_h - 1) + 1:geom.stride,
                        w0:w0 + geom.stride * (out_w - 1) + 1:geom.stride] += \
                np.einsum('bgohw,goc->bgchw', up, w[:, :, :, k, l])
    grad = grad_padded[:, :, :, p:p + height, p:p + width]
    return np.ascontiguousarray(grad.reshape(batch, geom.in_channels, height, width))


def channel_slice(grad: np.ndarray, geom: ConvGeometry, channel: int) -> np.ndarray:
    """Weight-gradient entries that belong to one input channel: (C'/g, D, D)."""
    group = channel // geom.in_per_group
    rows = slice(group * geom.out_per_group, (group + 1) * geom.out_per_group)
    return grad[rows, channel % geom.in_per_group]


def channel_weight_mask(flags: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Expand per-input-channel flags to a boolean mask over the weight tensor."""
    g, cpg, opg, d = geom.groups, geom.in_per_group, geom.out_per_group, geom.kernel
    expanded = np.broadcast_to(np.asarray(flags, dtype=bool).reshape(g, 1, cpg, 1, 1), (g, opg, cpg, d, d))
    return expanded.reshape(geom.weight_shape)


# ----------------------------------------------------------------------
# Layer primitives
# ----------------------------------------------------------------------

def relu_forward(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (max(z, 0), indicator 1_{z>0}); the indicator is the cache."""
    active = z > 0
    return np.where(active, z, 0.0), active


def relu_backward(active: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if active.shape != dy.shape:
        raise ShapeError("relu_backward", "shape", active.shape, dy.shape)
    return np.where(active, dy, 0.0)


def global_avg_pool_forward(x) -> Tuple[np.ndarray, Tuple[int, int]]:
    """(B, C, H, W) -> (B, C) spatial means; cache is (H, W)."""
    x = as_tensor4(x, "global_avg_pool input")
    return x.mean(axis=(2, 3)), (x.shape[2], x.shape[3])


def global_avg_pool_backward(hw: Tuple[int, int], dy: np.ndarray) -> np.ndarray:
    if dy.ndim != 2:
        raise ShapeError("global_avg_pool_backward", "upstream rank", 2, dy.ndim)
    height, width = hw
    spread = dy / (height * width)
    return np.ascontiguousarray(np.broadcast_to(spread[:, :, None, None], dy.shape + (height, width)))


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """y = x W^T + b with W of shape (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear_forward", "input features", weight.shape[1], x.shape[-1])
    if bias.shape != (weight.shape[0],):
        raise ShapeError("linear_forward", "bias length", weight.shape[0], bias.shape)
    return x @ weight.T + bias


def linear_backward(x: np.ndarray, weight: np.ndarray, dy: np.ndarray
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dW, db); x is the cached layer input."""
    if dy.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError("linear_backward", "upstream shape", (x.shape[0], weight.shape[0]), dy.shape)
    return dy @ weight, dy.T @ x, dy.sum(axis=0)


def residual_add_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError("residual_add", "branch shape", a.shape, b.shape)
    return a + b


def residual_add_backward(dy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Both branches receive the upstream derivative unchanged."""
    return dy, dy


def softmax_cross_entropy(logits, labels) -> Tuple[float, np.ndarray]:
    """
    Mean cross-entropy over the batch and its derivative (softmax - onehot) / B.
    Accepts (B, K) or (B, K, 1, 1) logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 4:
        if logits.shape[2:] != (1, 1):
            raise ShapeError("softmax_cross_entropy", "logit spatial dims", (1, 1), logits.shape[2:])
        logits = logits.reshape(logits.shape[0], logits.shape[1])
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy", "logit rank", 2, logits.ndim)
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError("softmax_cross_entropy", "label count", batch, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError("softmax_cross_entropy", "label range", f"[0, {classes})",
                         (int(labels.min()), int(labels.max())))

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(batch)
    loss = float(-log_probs[rows, labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / batch
