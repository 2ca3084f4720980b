"""Finite-difference certification of every operator's backward rule.

Each case builds a scalar objective ``sum(op(x) * W)`` with a fixed random
projection ``W`` and compares the reverse-mode gradient against central
differences in double precision.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ddpnet import ops
from ddpnet._tape import record
from ddpnet.autodiff import finite_diff_check
from ddpnet.tensor import Tensor, add, concat_channels, split_channels

TOLERANCE = 1e-4
EPS = 1e-4
MODEL_EPS = 1e-6


@dataclass
class GradCase:
    """One operator under test: ``make(rng)`` returns (input array, scalar function)."""

    name: str
    make: Callable[[np.random.Generator], tuple[np.ndarray, Callable[[Tensor], Tensor]]]


def _dims(rng, lo=1, hi=5):
    return [int(v) for v in rng.integers(lo, hi + 1, size=4)]


def _project(out_shape, rng):
    return rng.standard_normal(out_shape)


def _case_conv(rng):
    n, c, h, w = _dims(rng, 1, 4)
    h, w = max(h, 3), max(w, 3)
    co = int(rng.integers(1, 5))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    dil = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    p = ops.ConvParams(c, co, (k, k), (stride, stride), (pad, pad), (dil, dil), has_bias=True)
    ho, wo = ((h + 2 * pad - dil * (k - 1) - 1) // stride + 1, (w + 2 * pad - dil * (k - 1) - 1) // stride + 1)
    if ho < 1 or wo < 1:
        pad = dil * (k - 1)
        p = ops.ConvParams(c, co, (k, k), (stride, stride), (pad, pad), (dil, dil), has_bias=True)
    wgt = rng.standard_normal(p.weight_shape)
    bias = rng.standard_normal(co)
    x = rng.standard_normal((n, c, h, w))
    ho, wo = p.out_hw(h, w)
    proj = _project((n, co, ho, wo), rng)
    # input, weight and bias are packed into one flat vector so one check covers all three

    def f(v: Tensor) -> Tensor:
        a, b, cc = _unpack(v, [x.shape, wgt.shape, bias.shape])
        return ops.weighted_sum(ops.conv2d(a, b, cc, p), proj)

    return np.concatenate([x.ravel(), wgt.ravel(), bias.ravel()]), f


def _unpack(flat: Tensor, shapes) -> list[Tensor]:
    """Slice a flat vector into tensors while keeping the gradient path back to it."""
    outs = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape))
        lo, hi = offset, offset + size
        piece = Tensor.wrap(flat.data[lo:hi].reshape(shape))

        def backward(g, lo=lo, hi=hi):
            full = np.zeros(flat.shape, dtype=g.dtype)
            full[lo:hi] = g.reshape(-1)
            return [full]

        outs.append(record("unpack", [flat], piece, backward))
        offset = hi
    return outs


def _unary(op, shape_fn=None):
    def make(rng):
        shape = shape_fn(rng) if shape_fn else _dims(rng)
        x = rng.standard_normal(shape)
        out_shape = op(Tensor.wrap(x)).shape
        proj = _project(out_shape, rng)
        return x, lambda t: ops.weighted_sum(op(t), proj)

    return make


def _even_dims(rng):
    n, c, h, w = _dims(rng, 1, 3)
    return [n, c, 2 * h, 2 * w]


def _case_batch_norm(mode):
    def make(rng):
        n, c, h, w = _dims(rng)
        if n * h * w < 2:
            h = 2
        x = rng.standard_normal((n, c, h, w))
        gamma = rng.standard_normal(c)
        beta = rng.standard_normal(c)
        rm = rng.standard_normal(c)
        rv = rng.random(c) + 0.5
        proj = _project((n, c, h, w), rng)

        def run(a, g, b):
            st = ops.BatchNormState(g, b, rm.copy(), rv.copy(), mode=mode)
            return ops.batch_norm(a, st)

        def f(v):
            pieces = _unpack(v, [x.shape, (c,), (c,)])
            return ops.weighted_sum(run(*pieces), proj)

        return np.concatenate([x.ravel(), gamma, beta]), f

    return make


def _case_dropout(rng):
    shape = _dims(rng)
    x = rng.standard_normal(shape)
    proj = _project(shape, rng)
    seed = int(rng.integers(1 << 30))
    # the same seed each call gives the same mask, which makes the objective deterministic
    return x, lambda t: ops.weighted_sum(ops.dropout(t, 0.3, np.random.default_rng(seed), True), proj)


def _case_relu(rng):
    shape = _dims(rng)
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < 1e-2, 0.5, x)  # keep away from the kink
    proj = _project(shape, rng)
    return x, lambda t: ops.weighted_sum(ops.relu(t), proj)


def _case_max_pool(rng):
    n, c, h, w = _even_dims(rng)
    # distinct values so no window has a tie within the step size
    x = rng.permutation(n * c * h * w).reshape(n, c, h, w) * 0.01 + rng.random((n, c, h, w)) * 1e-3
    proj = _project((n, c, h // 2, w // 2), rng)
    return x, lambda t: ops.weighted_sum(ops.pool2x2(t, "max"), proj)


def _case_pixel_shuffle(rng):
    r = int(rng.integers(1, 3))
    n, c, h, w = _dims(rng, 1, 3)
    return _unary(lambda t: ops.pixel_shuffle(t, r), lambda _: [n, c * r * r, h, w])(rng)


def _case_bilinear(rng):
    factor = int(rng.integers(1, 4))
    return _unary(lambda t: ops.bilinear_upsample(t, factor))(rng)


def _case_dynamic_filter(rng):
    k = int(rng.choice([1, 3]))
    n, c, h, w = _dims(rng)
    hm = rng.standard_normal((n, c, h, w))
    filt = rng.standard_normal((n, k * k, h, w))
    proj = _project((n, c, h, w), rng)

    def f(v):
        a, b = _unpack(v, [hm.shape, filt.shape])
        return ops.weighted_sum(ops.dynamic_filter_apply(a, b), proj)

    return np.concatenate([hm.ravel(), filt.ravel()]), f


def _case_cross_entropy(rng):
    n, c, h, w = _dims(rng)
    c = max(c, 2)
    logits = rng.standard_normal((n, c, h, w))
    labels = rng.integers(0, c, size=(n, h, w))
    labels[rng.random((n, h, w)) < 0.2] = 255
    return logits, lambda t: ops.cross_entropy_loss(t, labels)


def _case_concat(rng):
    n, _, h, w = _dims(rng)
    sizes = [int(v) for v in rng.integers(1, 4, size=3)]
    shapes = [(n, s, h, w) for s in sizes]
    x = rng.standard_normal(sum(int(np.prod(s)) for s in shapes))
    proj = _project((n, sum(sizes), h, w), rng)

    def f(v):
        return ops.weighted_sum(concat_channels(_unpack(v, shapes)), proj)

    return x, f


def _case_split(rng):
    n, _, h, w = _dims(rng)
    sizes = [int(v) for v in rng.integers(1, 4, size=2)]
    x = rng.standard_normal((n, sum(sizes), h, w))
    projs = [_project((n, s, h, w), rng) for s in sizes]

    def f(t):
        a, b = split_channels(t, sizes)
        return _sum_scalars([ops.weighted_sum(a, projs[0]), ops.weighted_sum(b, projs[1])])

    return x, f


def _sum_scalars(parts: list[Tensor]) -> Tensor:
    out = parts[0]
    for p in parts[1:]:
        out = add(out, p)
    return out


def _case_add(rng):
    shape = _dims(rng)
    x = rng.standard_normal(2 * int(np.prod(shape)))
    proj = _project(shape, rng)

    def f(v):
        a, b = _unpack(v, [tuple(shape), tuple(shape)])
        return ops.weighted_sum(add(a, b), proj)

    return x, f


CASES: list[GradCase] = [
    GradCase("concat_channels", _case_concat),
    GradCase("split_channels", _case_split),
    GradCase("add", _case_add),
    GradCase("conv2d", _case_conv),
    GradCase("batch_norm[train]", _case_batch_norm("train")),
    GradCase("batch_norm[eval]", _case_batch_norm("eval")),
    GradCase("relu", _case_relu),
    GradCase("dropout", _case_dropout),
    GradCase("pool2x2[avg]", _unary(lambda t: ops.pool2x2(t, "avg"), _even_dims)),
    GradCase("pool2x2[max]", _case_max_pool),
    GradCase("bilinear_upsample", _case_bilinear),
    GradCase("pixel_shuffle", _case_pixel_shuffle),
    GradCase("channel_softmax", _unary(ops.channel_softmax)),
    GradCase("dynamic_filter_apply", _case_dynamic_filter),
    GradCase("cross_entropy_loss", _case_cross_entropy),
]


def check_op(case: GradCase, rng: np.random.Generator, trials: int = 20) -> float:
    worst = 0.0
    for _ in range(trials):
        x, f = case.make(rng)
        worst = max(worst, finite_diff_check(f, x, eps=EPS))
    return worst


def run_suite(seed: int = 0, trials: int = 20, cases: list[GradCase] | None = None) -> dict[str, float]:
    """Worst relative error per operator, in case order."""
    rng = np.random.default_rng(seed)
    return {case.name: check_op(case, rng, trials) for case in (cases or CASES)}


def check_model(seed: int = 0, per_tensor: int = 2, size: int = 64, eps: float = MODEL_EPS) -> dict[str, float]:
    """Finite-difference check of a whole tiny network in double precision.

    Dropout is disabled and batch norm runs in train mode. Every parameter tensor
    contributes ``per_tensor`` sampled coordinates, and the input contributes
    another ``per_tensor``. Returns the worst relative error per tensor name.

    The step is smaller than the per-operator one: a shift of a BN scale or an
    early weight moves thousands of ReLU inputs at once, and with a 1e-4 step
    some of them cross zero inside the difference stencil. At 64x64 the last
    stage still normalises over 8 values per channel; at 32x32 it would see 2,
    where train-mode BN makes the output nearly input-independent and the
    gradients vanish into roundoff.
    """
    from ddpnet.autodiff import Tape, gradients
    from ddpnet.model import build_ddpnet, preset_spec

    rng = np.random.default_rng(seed)
    spec = preset_spec("tiny").replace(dpm_dropout=0.0, dense_dropout=0.0, input_size=(size, size))
    model = build_ddpnet(spec, rng=seed, dtype=np.float64)
    x = Tensor.wrap(rng.standard_normal((2, 3, size, size)), requires_grad=True)
    proj = rng.standard_normal((2, spec.num_classes, size, size))

    def objective() -> Tensor:
        return ops.weighted_sum(model.forward(x, "train"), proj)

    named = list(model.named_parameters()) + [("input", x)]
    with Tape():
        loss = objective()
    analytic = gradients(loss, [t for _, t in named])
    report = {}
    for (name, t), g in zip(named, analytic):
        flat_g = g.reshape(-1)
        worst = 0.0
        for i in rng.choice(t.size, size=min(per_tensor, t.size), replace=False):
            base = t.data
            vals = []
            for sign in (1.0, -1.0):
                moved = base.copy().reshape(-1)
                moved[i] += sign * eps
                t.data = moved.reshape(base.shape)
                vals.append(objective().item())
            t.data = base
            numeric = (vals[0] - vals[1]) / (2 * eps)
            a = flat_g[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
        report[name] = worst
    return report
