"""Building blocks of the network.

Every layer does two things from the same description: ``forward`` executes
it on tensors, and ``trace`` walks it symbolically, emitting one
:class:`OpRecord` per primitive so the analysis module can infer shapes and
count parameters and FLOPs without allocating activations.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ddpnet import ops
from ddpnet.errors import ConfigError, ShapeError
from ddpnet.ops import BatchNormState, ConvParams
from ddpnet.tensor import Shape, Tensor, add, concat_channels, split_channels


@dataclass
class Context:
    """Per-call execution settings: train mode enables dropout draws."""

    training: bool = False
    rng: np.random.Generator | None = None


@dataclass
class OpRecord:
    path: str
    kind: str
    in_shapes: tuple[Shape, ...]
    out_shape: Shape
    attrs: dict = field(default_factory=dict)
    params: int = 0


class Tracer:
    def __init__(self):
        self.records: list[OpRecord] = []
        self._scope: list[str] = []

    @contextlib.contextmanager
    def scope(self, name: str):
        self._scope.append(name)
        try:
            yield
        finally:
            self._scope.pop()

    @property
    def path(self) -> str:
        return ".".join(self._scope)

    def emit(self, kind: str, in_shapes, out_shape: Shape, params: int = 0, **attrs) -> Shape:
        if isinstance(in_shapes, Shape):
            in_shapes = (in_shapes,)
        if min(out_shape) < 1:
            raise ShapeError(f"{self.path}: {kind} produces non-positive shape {tuple(out_shape)}")
        self.records.append(OpRecord(self.path, kind, tuple(in_shapes), out_shape, attrs, params))
        return out_shape


def he_normal(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    """Named container of parameters, batch-norm states and sub-layers."""

    def __init__(self, name: str):
        self.name = name
        self._params: dict[str, Tensor] = {}
        self._bns: dict[str, BatchNormState] = {}
        self._children: dict[str, Layer] = {}

    def add_child(self, layer: "Layer") -> "Layer":
        if layer.name in self._children:
            raise ConfigError(f"duplicate layer name {layer.name!r} in {self.name!r}")
        self._children[layer.name] = layer
        return layer

    def children(self) -> list["Layer"]:
        return list(self._children.values())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        base = f"{prefix}{self.name}."
        for key, t in self._params.items():
            yield base + key, t
        for key, bn in self._bns.items():
            yield f"{base}{key}.gamma", bn.gamma
            yield f"{base}{key}.beta", bn.beta
        for child in self._children.values():
            yield from child.named_parameters(base)

    def named_bn_states(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        base = f"{prefix}{self.name}."
        for key, bn in self._bns.items():
            yield base + key, bn
        for child in self._children.values():
            yield from child.named_bn_states(base)

    def set_mode(self, mode: str) -> None:
        for _, bn in self.named_bn_states():
            bn.mode = mode

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ConvUnit(Layer):
    """Convolution, then optional batch norm, then optional ReLU (post-activation order)."""

    def __init__(self, name: str, p: ConvParams, rng: np.random.Generator, *, norm: bool = True,
                 act: bool = True, dtype=np.float32):
        super().__init__(name)
        self.p = p
        self.norm = norm
        self.act = act
        self._params["weight"] = Tensor.wrap(he_normal(p.weight_shape, rng, dtype), requires_grad=True)
        if p.has_bias:
            self._params["bias"] = Tensor.wrap(np.zeros(p.out_channels, dtype=dtype), requires_grad=True)
        if norm:
            self._bns["bn"] = BatchNormState.create(p.out_channels, dtype)

    @property
    def weight(self) -> Tensor:
        return self._params["weight"]

    @property
    def bias(self) -> Tensor | None:
        return self._params.get("bias")

    @property
    def bn(self) -> BatchNormState | None:
        return self._bns.get("bn")

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        y = ops.conv2d(x, self.weight, self.bias, self.p)
        if self.norm:
            y = ops.batch_norm(y, self.bn)
        if self.act:
            y = ops.relu(y)
        return y

    def trace(self, tr: Tracer, shape: Shape) -> Shape:
        if shape.c != self.p.in_channels:
            raise ShapeError(f"{tr.path}.{self.name}: expects {self.p.in_channels} channels, got {shape.c}")
        with tr.scope(self.name):
            ho, wo = self.p.out_hw(shape.h, shape.w)
            out = Shape(shape.n, self.p.out_channels, ho, wo)
            nparams = int(np.prod(self.p.weight_shape)) + (self.p.out_channels if self.p.has_bias else 0)
            tr.emit("conv", shape, out, nparams, conv=self.p)
            if self.norm:
                tr.emit("bn", out, out, 2 * out.c)
            if self.act:
                tr.emit("relu", out, out)
        return out


class InitialBlock(Layer):
    """Stride-2 3x3 conv, then a stride-2 3x3 conv branch beside a 2x2 max-pool branch, concatenated."""

    def __init__(self, in_channels: int, stem_width: int, rng, dtype=np.float32, name: str = "initial"):
        super().__init__(name)
        if stem_width < 1 or stem_width % 2:
            raise ConfigError(f"stem width must be a positive even number, got {stem_width}")
        self.stem_width = stem_width
        self.conv = self.add_child(ConvUnit("conv", ConvParams(in_channels, stem_width, 3, 2, 1), rng, dtype=dtype))
        self.branch = self.add_child(ConvUnit("branch", ConvParams(stem_width, stem_width, 3, 2, 1), rng, dtype=dtype))

    @property
    def out_channels(self) -> int:
        return 2 * self.stem_width

    def _check(self, h: int, w: int, path: str) -> None:
        if h % 4 or w % 4:
            raise ShapeError(f"{path}: input extents {h}x{w} must be divisible by 4")

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        self._check(x.shape[2], x.shape[3], self.name)
        y = self.conv(x, ctx)
        return concat_channels([self.branch(y, ctx), ops.pool2x2(y, "max")])

    def trace(self, tr: Tracer, shape: Shape) -> Shape:
        with tr.scope(self.name):
            self._check(shape.h, shape.w, tr.path)
            y = self.conv.trace(tr, shape)
            a = self.branch.trace(tr, y)
            with tr.scope("pool"):
                b = tr.emit("maxpool", y, Shape(y.n, y.c, y.h // 2, y.w // 2))
            with tr.scope("concat"):
                return tr.emit("concat", (a, b), a.with_channels(a.c + b.c))


class StemConv(Layer):
    """Single stride-2 3x3 conv stem used by the reduced-resolution variant."""

    def __init__(self, in_channels: int, out_channels: int, rng, dtype=np.float32, name: str = "initial"):
        super().__init__(name)
        self.out_channels = out_channels
        self.conv = self.add_child(ConvUnit("conv", ConvParams(in_channels, out_channels, 3, 2, 1), rng, dtype=dtype))

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        return self.conv(x, ctx)

    def trace(self, tr: Tracer, shape: Shape) -> Shape:
        with tr.scope(self.name):
            return self.conv.trace(tr, shape)


class DenseLayer(Layer):
    """1x1 bottleneck then 3x3 conv producing ``growth`` maps, concatenated onto the input."""

    def __init__(self, name: str, in_channels: int, growth: int, bottleneck: int, rng,
                 dropout: float = 0.0, dtype=np.float32):
        super().__init__(name)
        if growth <= 0:
            raise ConfigError(f"growth rate must be positive, got {growth}")
        self.in_channels = in_channels
        self.growth = growth
        self.dropout = dropout
        self.reduce = self.add_child(ConvUnit("reduce", ConvParams(in_channels, bottleneck, 1), rng, dtype=dtype))
        self.conv = self.add_child(ConvUnit("conv", ConvParams(bottleneck, growth, 3, 1, 1), rng, dtype=dtype))

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.growth

    def new_features(self, x: Tensor, ctx: Context) -> Tensor:
        return ops.dropout(self.conv(self.reduce(x, ctx), ctx), self.dropout, ctx.rng, ctx.training)

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        return concat_channels([x, self.new_features(x, ctx)])

    def trace(self, tr: Tracer, shape: Shape) -> Shape:
        with tr.scope(self.name):
            y = self.conv.trace(tr, self.reduce.trace(tr, shape))
            if self.dropout:
                with tr.scope("dropout"):
                    tr.emit("dropout", y, y)
            with tr.scope("concat"):
                return tr.emit("concat", (shape, y), shape.with_channels(shape.c + y.c))


class DualPathModule(Layer):
    """Two bottleneck branches, plain 3x3 and dilated 3x3, each adding growth/2 maps.

    ``form="c"`` computes both bottlenecks with one 1x1 conv and splits its
    output; ``form="b"`` keeps two separate 1x1 convs. Same function, different
    kernel launch pattern.
    """

    def __init__(self, name: str, in_channels: int, growth: int, branch_width: int, dilation: int, rng,
                 form: str = "c", dropout: float = 0.1, dtype=np.float32):
        super().__init__(name)
        if growth <= 0 or growth % 2:
            raise ConfigError(f"dual-path growth rate must be positive and even, got {growth}")
        if dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {dilation}")
        if form not in ("b", "c"):
            raise ConfigError(f"dual-path form must be 'b' or 'c', got {form!r}")
        self.in_channels = in_channels
        self.growth = growth
        self.branch_width = branch_width
        self.dilation = dilation
        self.form = form
        self.dropout = dropout
        half = growth // 2
        if form == "c":
            self.reduce = self.add_child(
                ConvUnit("reduce", ConvParams(in_channels, 2 * branch_width, 1), rng, dtype=dtype))
        else:
            self.reduce_plain = self.add_child(
                ConvUnit("reduce_plain", ConvParams(in_channels, branch_width, 1), rng, dtype=dtype))
            self.reduce_dilated = self.add_child(
                ConvUnit("reduce_dilated", ConvParams(in_channels, branch_width, 1), rng, dtype=dtype))
        self.plain = self.add_child(ConvUnit("plain", ConvParams(branch_width, half, 3, 1, 1), rng, dtype=dtype))
        self.dilated = self.add_child(
            ConvUnit("dilated", ConvParams(branch_width, half, 3, 1, dilation, dilation), rng, dtype=dtype))

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.growth

    def load_from(self, other: "DualPathModule") -> None:
        """Copy ``other``'s weights, splitting or joining the shared 1x1 as the two forms require."""
        if (other.in_channels, other.growth, other.branch_width, other.dilation) != \
                (self.in_channels, self.growth, self.branch_width, self.dilation):
            raise ConfigError(f"{self.name}: cannot identify modules with different hyperparameters")
        for unit in ("plain", "dilated"):
            _copy_unit(getattr(other, unit), getattr(self, unit))
        halves = [slice(0, self.branch_width), slice(self.branch_width, 2 * self.branch_width)]
        if self.form == other.form:
            pairs = [("reduce", "reduce", slice(None))] if self.form == "c" else \
                [("reduce_plain", "reduce_plain", slice(None)), ("reduce_dilated", "reduce_dilated", slice(None))]
            for src, dst, sl in pairs:
                _copy_unit(getattr(other, src), getattr(self, dst), sl)
        elif self.form == "b":
            _copy_unit(other.reduce, self.reduce_plain, halves[0])
            _copy_unit(other.reduce, self.reduce_dilated, halves[1])
        else:
            for src, sl in zip((other.reduce_plain, other.reduce_dilated), halves):
                _copy_unit(src, self.reduce, slice(None), sl)

    def new_features(self, x: Tensor, ctx: Context) -> Tensor:
        if self.form == "c":
            a, b = split_channels(self.reduce(x, ctx), [self.branch_width, self.branch_width])
        else:
            a, b = self.reduce_plain(x, ctx), self.reduce_dilated(x, ctx)
        y = concat_channels([self.plain(a, ctx), self.dilated(b, ctx)])
        return ops.dropout(y, self.dropout, ctx.rng, ctx.training)

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        return concat_channels([x, self.new_features(x, ctx)])

    def trace(self, tr: Tracer, shape: Shape) -> Shape:
        with tr.scope(self.name):
            if self.form == "c":
                r = self.reduce.trace(tr, shape)
                half = r.with_channels(self.branch_width)
                with tr.scope("split"):
                    tr.emit("split", r, half)
                a = b = half
            else:
                a = self.reduce_plain.trace(tr, shape)
                b = self.reduce_dilated.trace(tr, shape)
            pa = self.plain.trace(tr, a)
            pb = self.dilated.trace(tr, b)
            with tr.scope("merge"):
                y = tr.emit("concat", (pa, pb), pa.with_channels(pa.c + pb.c))
            if self.dropout:
                with tr.scope("dropout"):
                    tr.emit("dropout", y, y)
            with tr.scope("concat"):
                return tr.emit("concat", (shape, y), shape.with_channels(shape.c + y.c))


class DenseBlock(Layer):
    def __init__(self, name: str, layers: list[Layer]):
        super().__init__(name)
        self.layers = [self.add_child(layer) for layer in layers]

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        for layer in self.layers:
            x = layer(x, ctx)
        return x

    def trace(self, tr: Tracer, shape: Shape) -> Shape:
        with tr.scope(self.name):
            for layer in self.layers:
                shape = layer.trace(tr, shape)
        return shape


class Transition(Layer):
    """Channel-preserving 1x1 conv, optionally followed by 2x2 average pooling.

    ``forward`` returns ``(output, tap)`` where the tap is the pre-pool tensor.
    """

    def __init__(self, name: str, channels: int, downsample: bool, rng, dtype=np.float32):
        super().__init__(name)
        if channels <= 0:
            raise ConfigError(f"transition channels must be positive, got {channels}")
        self.channels = channels
        self.downsample = downsample
        self.conv = self.add_child(ConvUnit("conv", ConvParams(channels, channels, 1), rng, dtype=dtype))

    @property
    def out_channels(self) -> int:
        return self.channels

    def forward(self, x: Tensor, ctx: Context) -> tuple[Tensor, Tensor]:
        tap = self.conv(x, ctx)
        out = ops.pool2x2(tap, "avg") if self.downsample else tap
        return out, tap

    def trace(self, tr: Tracer, shape: Shape) -> tuple[Shape, Shape]:
        with tr.scope(self.name):
            tap = self.conv.trace(tr, shape)
            if not self.downsample:
                return tap, tap
            if tap.h % 2 or tap.w % 2:
                raise ShapeError(f"{tr.path}: cannot pool odd extents {tap.h}x{tap.w}")
            with tr.scope("pool"):
                out = tr.emit("avgpool", tap, Shape(tap.n, tap.c, tap.h // 2, tap.w // 2))
            return out, tap


class UpsamplingModule(Layer):
    """Doubles a heatmap's resolution and refines it with position-wise generated filters.

    Filter path on the feature tap: 1x1 conv, BN, ReLU, 3x3 conv to
    ``4 * window**2`` channels, BN, pixel shuffle by 2, channel softmax. The
    heatmap is bilinearly doubled, then filtered with those weights.
    """

    factor = 2

    def __init__(self, name: str, feature_channels: int, width: int, window: int, rng, dtype=np.float32):
        super().__init__(name)
        if window < 1:
            raise ConfigError(f"filter window must be >= 1, got {window}")
        self.feature_channels = feature_channels
        self.width = width
        self.window = window
        r = self.factor
        self.compress = self.add_child(ConvUnit("compress", ConvParams(feature_channels, width, 1), rng, dtype=dtype))
        self.generate = self.add_child(
            ConvUnit("generate", ConvParams(width, r * r * window * window, 3, 1, 1), rng, act=False, dtype=dtype))

    def filters(self, feature: Tensor, ctx: Context) -> Tensor:
        f = self.generate(self.compress(feature, ctx), ctx)
        return ops.channel_softmax(ops.pixel_shuffle(f, self.factor))

    def forward(self, heatmap: Tensor, feature: Tensor, ctx: Context) -> Tensor:
        if heatmap.shape[2:] != feature.shape[2:]:
            raise ShapeError(f"{self.name}: heatmap {heatmap.shape} and feature {feature.shape} resolutions differ")
        up = ops.bilinear_upsample(heatmap, self.factor)
        return ops.dynamic_filter_apply(up, self.filters(feature, ctx))

    def trace(self, tr: Tracer, heatmap: Shape, feature: Shape) -> Shape:
        with tr.scope(self.name):
            if (heatmap.h, heatmap.w) != (feature.h, feature.w):
                raise ShapeError(f"{tr.path}: heatmap {tuple(heatmap)} and feature {tuple(feature)} resolutions differ")
            r = self.factor
            g = self.generate.trace(tr, self.compress.trace(tr, feature))
            with tr.scope("shuffle"):
                g = tr.emit("pixel_shuffle", g, Shape(g.n, g.c // (r * r), g.h * r, g.w * r), r=r)
            with tr.scope("softmax"):
                tr.emit("softmax", g, g)
            with tr.scope("upsample"):
                up = tr.emit("bilinear", heatmap, Shape(heatmap.n, heatmap.c, heatmap.h * r, heatmap.w * r), factor=r)
            with tr.scope("apply"):
                return tr.emit("dynfilter", (up, g), up, window=self.window)

    def force_delta_filters(self, big: float = 200.0) -> None:
        """Pin the generated filters to the centre tap so the module reduces to bilinear upsampling.

        Zeroes the final BN scale and puts a large shift on the channels that
        the pixel shuffle routes to the centre tap. Only meaningful in eval mode.
        """
        bn = self.generate.bn
        r2 = self.factor * self.factor
        centre = (self.window // 2) * self.window + self.window // 2
        beta = np.zeros(bn.channels, dtype=bn.beta.dtype)
        beta[centre * r2: (centre + 1) * r2] = big
        bn.gamma.data = _frozen(np.zeros_like(bn.gamma.data))
        bn.beta.data = _frozen(beta)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _copy_unit(src: ConvUnit, dst: ConvUnit, src_rows: slice = slice(None), dst_rows: slice = slice(None)) -> None:
    """Copy output channels ``src_rows`` of ``src`` into output channels ``dst_rows`` of ``dst``."""

    def put(target: np.ndarray, value: np.ndarray) -> np.ndarray:
        out = target.copy()
        out[dst_rows] = value[src_rows]
        return out

    dst.weight.data = _frozen(put(dst.weight.data, src.weight.data))
    if dst.bias is not None:
        dst.bias.data = _frozen(put(dst.bias.data, src.bias.data))
    if dst.bn is not None:
        for attr in ("gamma", "beta"):
            getattr(dst.bn, attr).data = _frozen(put(getattr(dst.bn, attr).data, getattr(src.bn, attr).data))
        dst.bn.running_mean = put(dst.bn.running_mean, src.bn.running_mean)
        dst.bn.running_var = put(dst.bn.running_var, src.bn.running_var)
