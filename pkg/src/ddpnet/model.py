"""Model specification, presets, and the assembled segmentation network."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ddpnet import ops
from ddpnet.errors import ConfigError, ShapeError
from ddpnet.layers import (
    ConvUnit,
    Context,
    DenseBlock,
    DenseLayer,
    DualPathModule,
    InitialBlock,
    Layer,
    StemConv,
    Tracer,
    Transition,
    UpsamplingModule,
)
from ddpnet.ops import BatchNormState, ConvParams
from ddpnet.tensor import Shape, Tensor, add

DIVISOR = 32
DEFAULT_DILATIONS = (2, 4, 8, 16, 2, 4, 8, 16)


# ------------------------------------------------------------------- specs


@dataclass(frozen=True)
class DenseLayerSpec:
    in_channels: int
    growth_rate: int
    bottleneck: int
    variant: str = "plain"  # plain | dpm_b | dpm_c
    dilation: int = 1
    dropout: float = 0.0


@dataclass(frozen=True)
class BlockSpec:
    layers: int
    growth_rate: int
    kind: str  # plain | dpm
    dilations: tuple[int, ...] = ()


@dataclass(frozen=True)
class UpsampleModuleSpec:
    feature_channels: int
    width: int = 64
    window: int = 3
    factor: int = 2


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "cityscapes"
    num_classes: int = 19
    in_channels: int = 3
    input_size: tuple[int, int] = (1024, 2048)
    stem_width: int = 32
    growth_rate: int = 32
    block_layers: tuple[int, ...] = (2, 4, 8, 8)
    block_kinds: tuple[str, ...] = ("plain", "plain", "dpm", "dpm")
    dilations: tuple[int, ...] = DEFAULT_DILATIONS
    bottleneck_width: int = 0  # 0 -> 4 * growth_rate
    dpm_branch_width: int = 0  # 0 -> 2 * growth_rate
    # per-block bottleneck as a multiple of growth_rate; overrides the two widths above
    # when set, and each dual-path branch then takes half of its block's bottleneck
    bottleneck_factors: tuple[int, ...] = ()
    dpm_form: str = "c"
    dpm_dropout: float = 0.1
    dense_dropout: float = 0.0
    upsample_module: bool = True
    upsample_width: int = 64
    filter_window: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in ("cityscapes", "camvid"):
            raise ConfigError(f"variant must be 'cityscapes' or 'camvid', got {self.variant!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.block_layers) != len(self.block_kinds) or not self.block_layers:
            raise ConfigError("block_layers and block_kinds must be non-empty and equally long")
        if any(k not in ("plain", "dpm") for k in self.block_kinds):
            raise ConfigError(f"block kinds must be 'plain' or 'dpm', got {self.block_kinds}")
        if any(n < 1 for n in self.block_layers):
            raise ConfigError(f"every block needs at least one layer: {self.block_layers}")
        if self.growth_rate < 1:
            raise ConfigError(f"growth_rate must be positive, got {self.growth_rate}")
        if "dpm" in self.block_kinds and self.growth_rate % 2:
            raise ConfigError(f"dual-path blocks need an even growth rate, got {self.growth_rate}")
        if not self.dilations or min(self.dilations) < 1:
            raise ConfigError(f"dilations must be a non-empty list of positive ints: {self.dilations}")
        if self.dpm_form not in ("b", "c"):
            raise ConfigError(f"dpm_form must be 'b' or 'c', got {self.dpm_form!r}")
        if self.stem_width < 1 or self.stem_width % 2:
            raise ConfigError(f"stem_width must be a positive even number, got {self.stem_width}")
        for p in (self.dpm_dropout, self.dense_dropout):
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"dropout rates must lie in [0, 1), got {p}")
        if self.bottleneck_factors:
            if len(self.bottleneck_factors) != len(self.block_layers):
                raise ConfigError(f"bottleneck_factors needs one entry per block, got {self.bottleneck_factors}")
            if min(self.bottleneck_factors) < 1:
                raise ConfigError(f"bottleneck_factors must be positive, got {self.bottleneck_factors}")
        if min(self.bottleneck_width, self.dpm_branch_width) < 0:
            raise ConfigError("bottleneck widths must be non-negative (0 selects the default)")
        h, w = self.input_size
        if h % DIVISOR or w % DIVISOR or h < 1 or w < 1:
            raise ShapeError(f"input size {h}x{w} must be positive multiples of {DIVISOR}")

    def bottleneck(self, block: int = 0) -> int:
        """1x1 output width of a plain dense layer in block ``block`` (0-based)."""
        if self.bottleneck_factors:
            return self.bottleneck_factors[block] * self.growth_rate
        return self.bottleneck_width or 4 * self.growth_rate

    def branch_width(self, block: int = 0) -> int:
        """Per-branch 1x1 width of a dual-path module in block ``block``."""
        if self.bottleneck_factors:
            return max(1, self.bottleneck_factors[block] * self.growth_rate // 2)
        return self.dpm_branch_width or 2 * self.growth_rate

    @property
    def stem_channels(self) -> int:
        return 2 * self.stem_width

    def blocks(self) -> list[BlockSpec]:
        out = []
        for n, kind in zip(self.block_layers, self.block_kinds):
            dil = tuple(self.dilations[i % len(self.dilations)] for i in range(n)) if kind == "dpm" else ()
            out.append(BlockSpec(n, self.growth_rate, kind, dil))
        return out

    def channel_trajectory(self) -> list[int]:
        """Channels after the stem and after each block."""
        chans = [self.stem_channels]
        for b in self.blocks():
            chans.append(chans[-1] + b.layers * b.growth_rate)
        return chans

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    # -------------------------------------------------------- text config

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: "ModelSpec | None" = None) -> "ModelSpec":
        base = base or cls()
        kinds = {f.name: f for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ConfigError(f"unknown model key {key!r}")
            changes[key] = _parse_value(raw, type(getattr(base, key)), key)
        return dataclasses.replace(base, **changes)

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        values = parse_config(text)
        preset = values.pop("preset", None)
        base = preset_spec(preset) if preset else None
        return cls.from_mapping({k: v for k, v in values.items() if "." not in k}, base)


def parse_config(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse_value(raw: str, kind: type, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            items = [s.strip() for s in raw.replace("x", ",").split(",") if s.strip()] if key == "input_size" \
                else [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) if s.lstrip("-").isdigit() else s for s in items)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


# ----------------------------------------------------------------- presets


def preset_spec(name: str) -> ModelSpec:
    if name == "cityscapes":
        return ModelSpec()
    if name == "camvid":
        return ModelSpec(
            variant="camvid",
            num_classes=11,
            input_size=(352, 480),
            block_layers=(2, 4, 8),
            block_kinds=("plain", "plain", "dpm"),
            bottleneck_factors=(1, 2, 4),
            upsample_width=32,
        )
    if name == "tiny":
        return ModelSpec(
            num_classes=3,
            input_size=(64, 64),
            stem_width=8,
            growth_rate=8,
            block_layers=(1, 1, 2, 2),
            upsample_width=16,
        )
    if name == "calibrated":
        return CALIBRATED
    raise ConfigError(f"unknown preset {name!r} (expected cityscapes, camvid, tiny or calibrated)")


# Bottlenecks that widen with depth (k, 2k, 4k, 4k) instead of a flat 4k, and a
# 32-channel filter generator. Lands on the reported 2.52M parameters and
# reproduces the reported per-stage cost differences between plain and
# dual-path blocks.
CALIBRATED = ModelSpec(bottleneck_factors=(1, 2, 4, 4), upsample_width=32)

PRESETS = ("cityscapes", "camvid", "tiny", "calibrated")


def ablation_spec(dpm_stages: int, base: ModelSpec | None = None) -> ModelSpec:
    """Dual-path modules in the last ``dpm_stages`` blocks, plain dense layers before them."""
    base = base or ModelSpec()
    n = len(base.block_layers)
    if not 0 <= dpm_stages <= n:
        raise ConfigError(f"dpm_stages must be in [0, {n}], got {dpm_stages}")
    return base.replace(block_kinds=tuple("dpm" if i >= n - dpm_stages else "plain" for i in range(n)))


# ---------------------------------------------------------------- builders


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(0 if rng is None else rng)


def build_initial_block(stem_width: int, in_channels: int = 3, rng=None, dtype=np.float32) -> InitialBlock:
    return InitialBlock(in_channels, stem_width, _rng(rng), dtype)


def build_dense_layer(spec: DenseLayerSpec, rng=None, dtype=np.float32, name: str = "layer") -> DenseLayer:
    if spec.variant != "plain":
        raise ConfigError(f"build_dense_layer builds plain layers; use build_dpm for {spec.variant!r}")
    return DenseLayer(name, spec.in_channels, spec.growth_rate, spec.bottleneck, _rng(rng), spec.dropout, dtype)


def build_dpm(spec: DenseLayerSpec, rng=None, dtype=np.float32, name: str = "layer") -> DualPathModule:
    """``spec.bottleneck`` is the per-branch width; the shared 1x1 of form c emits twice that."""
    form = {"dpm_b": "b", "dpm_c": "c"}.get(spec.variant)
    if form is None:
        raise ConfigError(f"build_dpm needs variant dpm_b or dpm_c, got {spec.variant!r}")
    return DualPathModule(name, spec.in_channels, spec.growth_rate, spec.bottleneck, spec.dilation, _rng(rng),
                          form, spec.dropout, dtype)


def build_transition(channels: int, downsample: bool, rng=None, dtype=np.float32, name: str = "transition") -> Transition:
    return Transition(name, channels, downsample, _rng(rng), dtype)


def build_upsampling_module(spec: UpsampleModuleSpec, rng=None, dtype=np.float32, name: str = "up") -> UpsamplingModule:
    if spec.factor != 2:
        raise ConfigError(f"the upsampling module doubles resolution; factor {spec.factor} unsupported")
    return UpsamplingModule(name, spec.feature_channels, spec.width, spec.window, _rng(rng), dtype)


class Stage(Layer):
    """One dense block followed by its transition layer."""

    def __init__(self, name: str, block: DenseBlock, transition: Transition):
        super().__init__(name)
        self.block = self.add_child(block)
        self.transition = self.add_child(transition)

    def forward(self, x: Tensor, ctx: Context) -> tuple[Tensor, Tensor]:
        return self.transition(self.block(x, ctx), ctx)

    def trace(self, tr: Tracer, shape: Shape) -> tuple[Shape, Shape]:
        with tr.scope(self.name):
            return self.transition.trace(tr, self.block.trace(tr, shape))


class Backbone(Layer):
    def __init__(self, spec: ModelSpec, rng, dtype=np.float32, name: str = "backbone"):
        super().__init__(name)
        self.spec = spec
        if spec.variant == "camvid":
            self.stem = self.add_child(StemConv(spec.in_channels, spec.stem_channels, rng, dtype))
        else:
            self.stem = self.add_child(InitialBlock(spec.in_channels, spec.stem_width, rng, dtype))
        chans = spec.stem_channels
        self.stages: list[Stage] = []
        blocks = spec.blocks()
        for i, b in enumerate(blocks, 1):
            layers: list[Layer] = []
            for j in range(b.layers):
                cin = chans + j * b.growth_rate
                if b.kind == "plain":
                    ls = DenseLayerSpec(cin, b.growth_rate, spec.bottleneck(i - 1), "plain", 1, spec.dense_dropout)
                    layers.append(build_dense_layer(ls, rng, dtype, name=f"layer{j + 1}"))
                else:
                    ls = DenseLayerSpec(cin, b.growth_rate, spec.branch_width(i - 1), f"dpm_{spec.dpm_form}",
                                        b.dilations[j], spec.dpm_dropout)
                    layers.append(build_dpm(ls, rng, dtype, name=f"layer{j + 1}"))
            block = DenseBlock("block", layers)
            chans = block.out_channels
            trans = build_transition(chans, i < len(blocks), rng, dtype, name="transition")
            self.stages.append(self.add_child(Stage(f"stage{i}", block, trans)))

    @property
    def tap_channels(self) -> list[int]:
        return [s.transition.channels for s in self.stages]

    def forward(self, x: Tensor, ctx: Context) -> tuple[Tensor, list[Tensor]]:
        x = _with_context(self.stem.name, self.stem, x, ctx)
        taps = []
        for stage in self.stages:
            x, tap = _with_context(stage.name, stage, x, ctx)
            taps.append(tap)
        return x, taps

    def rows(self, x: Tensor, ctx: Context | None = None) -> list[tuple[str, Tensor]]:
        """Executed outputs of the stem and of every dense block and transition, in order."""
        ctx = ctx or Context()
        x = self.stem(x, ctx)
        out = [(self.stem.name, x)]
        for stage in self.stages:
            x = stage.block(x, ctx)
            out.append((f"{stage.name}.block", x))
            x, _ = stage.transition(x, ctx)
            out.append((f"{stage.name}.transition", x))
        return out

    def row_shapes(self, shape) -> list[tuple[str, Shape]]:
        """The same rows as :meth:`rows`, inferred symbolically."""
        tr = Tracer()
        with tr.scope(self.name):
            s = self.stem.trace(tr, Shape.of(shape))
            out = [(self.stem.name, s)]
            for stage in self.stages:
                with tr.scope(stage.name):
                    s = stage.block.trace(tr, s)
                    out.append((f"{stage.name}.block", s))
                    s, _ = stage.transition.trace(tr, s)
                    out.append((f"{stage.name}.transition", s))
        return out

    def trace(self, tr: Tracer, shape: Shape) -> tuple[Shape, list[Shape]]:
        with tr.scope(self.name):
            shape = self.stem.trace(tr, shape)
            taps = []
            for stage in self.stages:
                shape, tap = stage.trace(tr, shape)
                taps.append(tap)
        return shape, taps


def _with_context(name: str, layer: Layer, *args):
    try:
        return layer(*args)
    except ShapeError as exc:
        raise ShapeError(f"{name}: {exc}") from exc


def build_backbone(spec: ModelSpec, rng=None, dtype=np.float32) -> Backbone:
    return Backbone(spec, _rng(rng), dtype)


class Decoder(Layer):
    """Label-space skip decoder: per-tap 1x1 heatmaps, upsampled and summed from coarse to fine."""

    def __init__(self, spec: ModelSpec, tap_channels: list[int], rng, dtype=np.float32, name: str = "decoder"):
        super().__init__(name)
        self.spec = spec
        c = spec.num_classes
        self.heads = [
            self.add_child(ConvUnit(f"head{i + 1}", ConvParams(tc, c, 1, has_bias=True), rng,
                                    norm=False, act=False, dtype=dtype))
            for i, tc in enumerate(tap_channels)
        ]
        # upsamplers[i] lifts the level-(i+1) heatmap to level i, guided by the level-(i+1) tap
        self.upsamplers: list[UpsamplingModule | None] = []
        for i in range(1, len(tap_channels)):
            if spec.upsample_module:
                us = UpsampleModuleSpec(tap_channels[i], spec.upsample_width, spec.filter_window)
                self.upsamplers.append(self.add_child(build_upsampling_module(us, rng, dtype, name=f"up{i + 1}")))
            else:
                self.upsamplers.append(None)

    def forward(self, taps: list[Tensor], out_hw: tuple[int, int], ctx: Context) -> Tensor:
        heat = [head(t, ctx) for head, t in zip(self.heads, taps)]
        y = heat[-1]
        for i in range(len(taps) - 2, -1, -1):
            us = self.upsamplers[i]
            up = us(y, taps[i + 1], ctx) if us is not None else ops.bilinear_upsample(y, 2)
            y = add(up, heat[i])
        return ops.bilinear_upsample(y, out_hw[0] // y.shape[2])

    def trace(self, tr: Tracer, taps: list[Shape], out_hw: tuple[int, int]) -> Shape:
        with tr.scope(self.name):
            heat = [head.trace(tr, t) for head, t in zip(self.heads, taps)]
            y = heat[-1]
            for i in range(len(taps) - 2, -1, -1):
                us = self.upsamplers[i]
                if us is not None:
                    up = us.trace(tr, y, taps[i + 1])
                else:
                    with tr.scope(f"up{i + 2}"):
                        up = tr.emit("bilinear", y, Shape(y.n, y.c, y.h * 2, y.w * 2), factor=2)
                if (up.h, up.w) != (heat[i].h, heat[i].w):
                    raise ShapeError(f"{tr.path}: skip shapes {tuple(up)} vs {tuple(heat[i])}")
                with tr.scope(f"skip{i + 1}"):
                    y = tr.emit("add", (up, heat[i]), up)
            factor = out_hw[0] // y.h
            with tr.scope("output"):
                return tr.emit("bilinear", y, Shape(y.n, y.c, y.h * factor, y.w * factor), factor=factor)


class DDPNet(Layer):
    """Dense dual-path backbone with the label-space skip decoder."""

    def __init__(self, spec: ModelSpec, rng=None, dtype=np.float32):
        super().__init__("ddpnet")
        rng = _rng(rng)
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.backbone = self.add_child(Backbone(spec, rng, dtype))
        self.decoder = self.add_child(Decoder(spec, self.backbone.tap_channels, rng, dtype))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for child in self.children():
            yield from child.named_parameters(prefix)

    def named_bn_states(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for child in self.children():
            yield from child.named_bn_states(prefix)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def check_input(self, shape) -> Shape:
        s = Shape.of(shape)
        if s.c != self.spec.in_channels:
            raise ShapeError(f"input has {s.c} channels, model expects {self.spec.in_channels}")
        if s.h % DIVISOR or s.w % DIVISOR:
            raise ShapeError(f"input extents {s.h}x{s.w} must be divisible by {DIVISOR}")
        return s

    def forward(self, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.check_input(x.shape)
        if x.dtype != self.dtype:
            raise ShapeError(f"input dtype {x.dtype} does not match model dtype {self.dtype}")
        self.set_mode(mode)
        ctx = Context(training=mode == "train", rng=rng)
        _, taps = self.backbone(x, ctx)
        return _with_context("decoder", self.decoder, taps, x.shape[2:], ctx)

    def trace(self, tr: Tracer, shape: Shape) -> Shape:
        shape = self.check_input(shape)
        _, taps = self.backbone.trace(tr, shape)
        return self.decoder.trace(tr, taps, (shape.h, shape.w))

    def astype(self, dtype) -> "DDPNet":
        """Convert every parameter and running statistic in place."""
        dtype = np.dtype(dtype)
        for _, t in self.named_parameters():
            arr = t.data.astype(dtype)
            arr.flags.writeable = False
            t.data = arr
        for _, bn in self.named_bn_states():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        self.dtype = dtype
        return self

    def force_delta_filters(self) -> None:
        for us in self.decoder.upsamplers:
            if us is not None:
                us.force_delta_filters()


def build_ddpnet(spec: ModelSpec, rng=None, dtype=np.float32) -> DDPNet:
    return DDPNet(spec, rng, dtype)


def with_dpm_form(model: DDPNet, form: str) -> DDPNet:
    """A copy of ``model`` whose dual-path modules use ``form``, with identified weights."""
    out = DDPNet(model.spec.replace(dpm_form=form), 0, model.dtype)
    for src_stage, dst_stage in zip(model.backbone.stages, out.backbone.stages):
        for src, dst in zip(src_stage.block.layers, dst_stage.block.layers):
            if isinstance(dst, DualPathModule):
                dst.load_from(src)
            else:
                _copy_layer(src, dst)
        _copy_layer(src_stage.transition, dst_stage.transition)
    _copy_layer(model.backbone.stem, out.backbone.stem)
    _copy_layer(model.decoder, out.decoder)
    return out


def _copy_layer(src: Layer, dst: Layer) -> None:
    sp, dp = dict(src.named_parameters()), dict(dst.named_parameters())
    for name, t in dp.items():
        t.data = sp[name].data
    sb, db = dict(src.named_bn_states()), dict(dst.named_bn_states())
    for name, bn in db.items():
        bn.running_mean = sb[name].running_mean.copy()
        bn.running_var = sb[name].running_var.copy()


def forward(model: DDPNet, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    return model.forward(x, mode, rng)
