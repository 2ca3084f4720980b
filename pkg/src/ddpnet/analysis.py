"""Static shape inference and cost accounting over layer graphs, plus the FPS harness.

FLOP conventions (one multiply-accumulate = 2 FLOPs):

==============  ==============================================
conv            2 * Cin * kh * kw per output element, +1 with bias
bn              2 per element (folded scale and shift)
relu, add       1 per element
avgpool         4 per output element (3 adds, 1 multiply)
maxpool         3 per output element (comparisons)
bilinear        8 per output element
softmax         5 per element (max, subtract, exp, sum, divide)
dynfilter       2 * K * K per output element
concat, split,  0 (data movement only; dropout is identity at inference)
pixel_shuffle,
dropout
==============  ==============================================

Reports also carry the bare multiply-accumulate count (conv and dynfilter
only), since published segmentation tables often quote that figure as FLOPs.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from ddpnet.layers import ConvUnit, Layer, OpRecord, Tracer
from ddpnet.tensor import Shape, Tensor

PER_ELEMENT = {
    "bn": 2,
    "relu": 1,
    "add": 1,
    "avgpool": 4,
    "maxpool": 3,
    "bilinear": 8,
    "softmax": 5,
    "concat": 0,
    "split": 0,
    "pixel_shuffle": 0,
    "dropout": 0,
}

DELIMITED_COLUMNS = ("level", "name", "kind", "n", "c", "h", "w", "params", "flops", "macs", "activation_bytes")


def _as_shapes(input_shape):
    if isinstance(input_shape, (list, tuple)) and input_shape and isinstance(input_shape[0], (list, tuple)):
        return [Shape.of(s) for s in input_shape]
    return [Shape.of(input_shape)]


def trace(graph: Layer, input_shape) -> tuple[list[OpRecord], object]:
    """Walk ``graph`` symbolically; returns the primitive records and the final output shape(s)."""
    tr = Tracer()
    out = graph.trace(tr, *_as_shapes(input_shape))
    return tr.records, out


def shape_infer(graph: Layer, input_shape) -> list[tuple[str, Shape]]:
    """Output shape of every primitive in execution order; no activations are allocated."""
    records, _ = trace(graph, input_shape)
    return [(r.path, r.out_shape) for r in records]


def op_flops(r: OpRecord) -> int:
    out = r.out_shape.size
    if r.kind == "conv":
        p = r.attrs["conv"]
        per = 2 * p.in_channels * p.kernel[0] * p.kernel[1] + (1 if p.has_bias else 0)
        return per * out
    if r.kind == "dynfilter":
        k = r.attrs["window"]
        return 2 * k * k * out
    try:
        return PER_ELEMENT[r.kind] * out
    except KeyError:
        raise ValueError(f"no FLOP rule for primitive {r.kind!r}") from None


def op_macs(r: OpRecord) -> int:
    """Multiply-accumulates of one primitive; zero for everything but conv and dynfilter."""
    if r.kind == "conv":
        p = r.attrs["conv"]
        return p.in_channels * p.kernel[0] * p.kernel[1] * r.out_shape.size
    if r.kind == "dynfilter":
        return r.attrs["window"] ** 2 * r.out_shape.size
    return 0


def count_params(graph: Layer) -> int:
    """Learnable parameters from the structural description: conv weights, biases, BN scale/shift."""
    total = 0
    stack = [graph]
    while stack:
        layer = stack.pop()
        if isinstance(layer, ConvUnit):
            p = layer.p
            total += int(np.prod(p.weight_shape))
            total += p.out_channels if p.has_bias else 0
            total += 2 * p.out_channels if layer.norm else 0
        stack.extend(layer.children())
    return total


def count_flops(graph: Layer, input_shape) -> int:
    records, _ = trace(graph, input_shape)
    return sum(op_flops(r) for r in records)


def count_macs(graph: Layer, input_shape) -> int:
    records, _ = trace(graph, input_shape)
    return sum(op_macs(r) for r in records)


@dataclass
class CostRow:
    name: str
    kind: str
    out_shape: Shape
    params: int
    flops: int
    activation_bytes: int
    macs: int = 0


@dataclass
class CostReport:
    input_shape: Shape
    rows: list[CostRow]
    itemsize: int = 4
    groups: list[tuple[str, list[CostRow]]] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def peak_activation_bytes(self) -> int:
        return max((r.activation_bytes for r in self.rows), default=0)

    def subtotal(self, prefix: str) -> tuple[int, int]:
        sel = [r for r in self.rows if r.name == prefix or r.name.startswith(prefix + ".")]
        return sum(r.params for r in sel), sum(r.flops for r in sel)

    def block_rows(self) -> list[CostRow]:
        out = []
        for name, rows in self.groups:
            out.append(CostRow(name, "block", rows[-1].out_shape, sum(r.params for r in rows),
                               sum(r.flops for r in rows), max(r.activation_bytes for r in rows),
                               sum(r.macs for r in rows)))
        return out

    def to_text(self, layers: bool = False) -> str:
        lines = [f"input {self.input_shape}"]
        header = f"{'name':<48} {'output (n x c x h x w)':>24} {'params':>12} {'FLOPs':>16}"
        if layers:
            lines += ["", header, "-" * len(header)]
            for r in self.rows:
                lines.append(f"{r.name:<48} {str(r.out_shape):>24} {r.params:>12,} {r.flops:>16,}")
        lines += ["", header, "-" * len(header)]
        for r in self.block_rows():
            lines.append(f"{r.name:<48} {str(r.out_shape):>24} {r.params:>12,} {r.flops:>16,}")
        lines.append("-" * len(header))
        bb_p, bb_f = self.subtotal("backbone")
        dec_p, dec_f = self.subtotal("decoder")
        if bb_p or bb_f:
            lines.append(f"{'backbone':<48} {'':>24} {bb_p:>12,} {bb_f:>16,}")
            lines.append(f"{'decoder':<48} {'':>24} {dec_p:>12,} {dec_f:>16,}")
        lines.append(f"{'total':<48} {'':>24} {self.total_params:>12,} {self.total_flops:>16,}")
        lines.append(
            f"totals: params {si(self.total_params, 3)}  FLOPs {si(self.total_flops)}  MACs {si(self.total_macs)}  "
            f"peak activation {self.peak_activation_bytes / 2**20:.2f} MiB"
        )
        return "\n".join(lines) + "\n"

    def to_delimited(self, sep: str = ",") -> str:
        """Rows in ``DELIMITED_COLUMNS`` order; ``level`` is op, block or total."""
        out = [sep.join(DELIMITED_COLUMNS)]

        def emit(level, r):
            s = r.out_shape
            out.append(sep.join(str(v) for v in (level, r.name, r.kind, s.n, s.c, s.h, s.w, r.params, r.flops,
                                                  r.macs, r.activation_bytes)))

        for r in self.rows:
            emit("op", r)
        for r in self.block_rows():
            emit("block", r)
        last = self.rows[-1].out_shape if self.rows else self.input_shape
        emit("total", CostRow("total", "total", last, self.total_params, self.total_flops,
                              self.peak_activation_bytes, self.total_macs))
        return "\n".join(out) + "\n"


def si(value: float, digits: int = 2) -> str:
    """``23712292864`` -> ``"23.71G"``; plain integers below a thousand."""
    for factor, suffix in ((1e9, "G"), (1e6, "M"), (1e3, "K")):
        if abs(value) >= factor:
            return f"{value / factor:.{digits}f}{suffix}"
    return str(int(value))


def _group_key(path: str) -> str:
    parts = path.split(".")
    if parts[0] == "backbone" and len(parts) > 1:
        return parts[1]
    return parts[0]


def cost_report(graph: Layer, input_shape, itemsize: int = 4) -> CostReport:
    records, _ = trace(graph, input_shape)
    rows = [CostRow(r.path, r.kind, r.out_shape, r.params, op_flops(r), r.out_shape.size * itemsize, op_macs(r))
            for r in records]
    groups: list[tuple[str, list[CostRow]]] = []
    for row in rows:
        key = _group_key(row.name)
        if groups and groups[-1][0] == key:
            groups[-1][1].append(row)
        else:
            groups.append((key, [row]))
    return CostReport(_as_shapes(input_shape)[0], rows, itemsize, groups)


@dataclass
class FpsStats:
    frames: int
    warmup: int
    latencies_ms: list[float]

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.latencies_ms)

    @property
    def std_ms(self) -> float:
        return statistics.pstdev(self.latencies_ms) if len(self.latencies_ms) > 1 else 0.0

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms

    def summary(self) -> str:
        return (f"frames {self.frames} (warmup {self.warmup})  mean {self.mean_ms:.3f} ms  "
                f"std {self.std_ms:.3f} ms  FPS {self.fps:.2f}")


def benchmark_fps(model, input_shape, frames: int = 100, warmup: int = 10, seed: int = 0) -> FpsStats:
    """Mean eval-mode latency over ``frames`` timed forward passes after ``warmup`` untimed ones."""
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    shape = Shape.of(input_shape)
    rng = np.random.default_rng(seed)
    x = Tensor.wrap(rng.random(tuple(shape)).astype(model.dtype))
    for _ in range(warmup):
        model.forward(x, "eval")
    lat = []
    for _ in range(frames):
        t0 = time.perf_counter()
        model.forward(x, "eval")
        lat.append((time.perf_counter() - t0) * 1000.0)
    return FpsStats(frames, warmup, lat)
