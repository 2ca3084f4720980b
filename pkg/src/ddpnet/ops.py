"""Differentiable operators.

Each function computes its forward value with the selected kernel backend and,
when a tape is active, records a backward rule. Inputs are never mutated; the
only side effect is the running-statistics update of a train-mode batch norm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ddpnet import kernels
from ddpnet._tape import record
from ddpnet.errors import ConfigError, DataError, ShapeError
from ddpnet.tensor import Tensor, _require_4d


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class ConvParams:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    has_bias: bool = False

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"channel counts must be positive: {self.in_channels}->{self.out_channels}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ConfigError(f"kernel, stride and dilation must be >= 1: {self}")
        if min(self.padding) < 0:
            raise ConfigError(f"padding must be >= 0: {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = kernels.conv_out_extent(h, self.kernel[0], self.stride[0], self.padding[0], self.dilation[0])
        wo = kernels.conv_out_extent(w, self.kernel[1], self.stride[1], self.padding[1], self.dilation[1])
        if ho < 1 or wo < 1:
            raise ShapeError(f"convolution {self.kernel} on {h}x{w} gives non-positive output {ho}x{wo}")
        return ho, wo


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one normalized layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32, name: str = "bn") -> "BatchNormState":
        return cls(
            gamma=Tensor.wrap(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor.wrap(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, params: ConvParams | None = None) -> Tensor:
    _require_4d(x, "conv2d")
    if params is None:
        params = ConvParams(weight.shape[1], weight.shape[0], weight.shape[2:], has_bias=bias is not None)
    if x.shape[1] != params.in_channels:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, expected {params.in_channels}")
    if weight.shape != params.weight_shape:
        raise ShapeError(f"conv2d: weight shape {weight.shape} != {params.weight_shape}")
    if bias is not None and bias.shape != (params.out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({params.out_channels},)")
    params.out_hw(x.shape[2], x.shape[3])
    stride, pad, dil = params.stride, params.padding, params.dilation
    y = kernels.conv2d_forward(x.data, weight.data, None if bias is None else bias.data, stride, pad, dil)
    out = Tensor.wrap(y)

    def backward(g):
        gx, gw = kernels.conv2d_backward(x.data, weight.data, g, stride, pad, dil)
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        return [gx, gw] if bias is None else [gx, gw, gb]

    inputs = [x, weight] if bias is None else [x, weight, bias]
    return record("conv2d", inputs, out, backward)


# ------------------------------------------------------------- normalization


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    _require_4d(x, "batch_norm")
    c = x.shape[1]
    if c != state.channels:
        raise ShapeError(f"batch_norm: input has {c} channels, state has {state.channels}")
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    beta = state.beta.data.reshape(1, c, 1, 1)
    dt = x.dtype.type
    if state.mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + dt(state.eps))
        mean = state.running_mean.astype(x.dtype)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = Tensor.wrap(gamma * xhat + beta)

        def backward_eval(g):
            return [g * (gamma * inv_std.reshape(1, c, 1, 1)), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))]

        return record("batch_norm", [x, state.gamma, state.beta], out, backward_eval)
    if state.mode != "train":
        raise ConfigError(f"batch_norm mode must be 'train' or 'eval', got {state.mode!r}")

    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise ShapeError(f"batch_norm: train mode needs more than one value per channel, got shape {x.shape}")
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean.reshape(1, c, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + dt(state.eps))).reshape(1, c, 1, 1)
    xhat = centered * inv_std
    out = Tensor.wrap(gamma * xhat + beta)

    mom = state.momentum
    unbiased = var * (m / max(m - 1, 1))
    state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
    state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)

    def backward_train(g):
        dxhat = g * gamma
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
        return [gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))]

    return record("batch_norm", [x, state.gamma, state.beta], out, backward_train)


# ---------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN, so a non-finite activation reaches the loss instead of turning into 0
    out = Tensor.wrap(np.maximum(x.data, x.dtype.type(0)))
    return record("relu", [x], out, lambda g: [g * mask])


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the sampled mask is kept for the backward pass."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= p
    scale = x.dtype.type(1.0 / (1.0 - p))
    mask = keep * scale
    mask = mask.astype(x.dtype)
    out = Tensor.wrap(x.data * mask)
    return record("dropout", [x], out, lambda g: [g * mask])


def channel_softmax(x: Tensor) -> Tensor:
    _require_4d(x, "channel_softmax")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor.wrap(s)

    def backward(g):
        return [s * (g - (g * s).sum(axis=1, keepdims=True))]

    return record("channel_softmax", [x], out, backward)


# ------------------------------------------------------------ resampling ops


def pool2x2(x: Tensor, kind: str = "avg") -> Tensor:
    _require_4d(x, "pool2x2")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"pool2x2 needs even extents, got {x.shape[2]}x{x.shape[3]}")
    if kind == "avg":
        out = Tensor.wrap(kernels.avgpool2_forward(x.data))
        return record("avg_pool", [x], out, lambda g: [kernels.avgpool2_backward(g)])
    if kind == "max":
        y, idx = kernels.maxpool2_forward(x.data)
        out = Tensor.wrap(y)
        return record("max_pool", [x], out, lambda g: [kernels.maxpool2_backward(g, idx)])
    raise ConfigError(f"pool kind must be 'avg' or 'max', got {kind!r}")


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    _require_4d(x, "bilinear_upsample")
    factor = int(factor)
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    hw = x.shape[2:]
    out = Tensor.wrap(kernels.bilinear_forward(x.data, factor))
    return record("bilinear", [x], out, lambda g: [kernels.bilinear_backward(g, factor, hw)])


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(n, c*r*r, h, w) -> (n, c, h*r, w*r); channel c*r*r + i*r + j lands at offset (i, j)."""
    _require_4d(x, "pixel_shuffle")
    n, cin, h, w = x.shape
    if r < 1 or cin % (r * r):
        raise ShapeError(f"pixel_shuffle: {cin} channels not divisible by r^2 = {r * r}")
    if r == 1:
        return x
    c = cin // (r * r)
    y = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)
    out = Tensor.wrap(y)

    def backward(g):
        return [g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, cin, h, w)]

    return record("pixel_shuffle", [x], out, backward)


def dynamic_filter_apply(heatmap: Tensor, filters: Tensor) -> Tensor:
    """Per-position K x K weighted sum of ``heatmap``, weights shared across its channels."""
    _require_4d(heatmap, "dynamic_filter_apply")
    _require_4d(filters, "dynamic_filter_apply")
    kk = filters.shape[1]
    k = math.isqrt(kk)
    if k * k != kk:
        raise ShapeError(f"dynamic_filter_apply: {kk} filter channels is not a perfect square")
    if filters.shape[0] != heatmap.shape[0] or filters.shape[2:] != heatmap.shape[2:]:
        raise ShapeError(f"dynamic_filter_apply: filters {filters.shape} vs heatmap {heatmap.shape}")
    if filters.dtype != heatmap.dtype:
        raise ShapeError("dynamic_filter_apply: dtype mismatch")
    out = Tensor.wrap(kernels.dynfilter_forward(heatmap.data, filters.data))

    def backward(g):
        gh, gf = kernels.dynfilter_backward(heatmap.data, filters.data, g)
        return [gh, gf]

    return record("dynamic_filter", [heatmap, filters], out, backward)


# --------------------------------------------------------------------- losses


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, ignore_label: int = 255) -> Tensor:
    """Mean per-pixel negative log-likelihood over non-ignored pixels (0 when none)."""
    _require_4d(logits, "cross_entropy_loss")
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"cross_entropy_loss: labels {labels.shape} vs logits {logits.shape}")
    valid = labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise DataError(f"label values {np.unique(labels[bad]).tolist()} outside [0, {c}) and not ignore")
    count = int(valid.sum())
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    nll = np.where(valid, lse - picked, 0)
    loss = nll.sum() / count if count else logits.dtype.type(0)
    out = Tensor.wrap(np.asarray(loss, dtype=logits.dtype))

    def backward(g):
        if count == 0:
            return [np.zeros_like(logits.data)]
        prob = np.exp(z - lse[:, None])
        np.put_along_axis(prob, safe[:, None], np.take_along_axis(prob, safe[:, None], axis=1) - 1, axis=1)
        prob *= valid[:, None]
        return [prob * (g / count)]

    return record("cross_entropy", [logits], out, backward)


# --------------------------------------------------------- scalar arithmetic
# Small helpers used to build scalar objectives in gradient checks.


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor.wrap(a.data * b.data)
    return record("mul", [a, b], out, lambda g: [g * b.data, g * a.data])


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    out = Tensor.wrap(np.abs(a.data))
    return record("abs", [a], out, lambda g: [g * sign])


def sum_all(a: Tensor) -> Tensor:
    out = Tensor.wrap(np.asarray(a.data.sum(), dtype=a.dtype))
    return record("sum", [a], out, lambda g: [np.broadcast_to(g, a.shape).astype(a.dtype)])


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """sum(a * weights) with a constant weight array; projects tensors to scalars."""
    w = np.asarray(weights, dtype=a.dtype)
    out = Tensor.wrap(np.asarray((a.data * w).sum(), dtype=a.dtype))
    return record("weighted_sum", [a], out, lambda g: [g * w])
