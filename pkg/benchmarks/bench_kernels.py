"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--quick]

Each row is one kernel call at a shape taken from the tiny and the full-size
network; the last column is the fallback time divided by the compiled time.
A whole-network forward of the tiny preset is timed at the end.
"""
from __future__ import annotations

import argparse
import statistics
import sys
import time

import numpy as np

from ddpnet import kernels
from ddpnet.analysis import benchmark_fps
from ddpnet.model import build_ddpnet, preset_spec


def _time(fn, repeat: int) -> float:
    fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def cases(rng: np.random.Generator, quick: bool):
    f32 = np.float32
    s = 32 if quick else 64
    x = rng.standard_normal((1, 64, s, 2 * s)).astype(f32)
    w3 = rng.standard_normal((32, 64, 3, 3)).astype(f32)
    w1 = rng.standard_normal((128, 64, 1, 1)).astype(f32)
    one, zero = (1, 1), (0, 0)
    gy3 = rng.standard_normal((1, 32, s, 2 * s)).astype(f32)
    hm = rng.standard_normal((1, 19, 2 * s, 4 * s)).astype(f32)
    filt = rng.random((1, 9, 2 * s, 4 * s)).astype(f32)
    small = rng.standard_normal((1, 19, s, 2 * s)).astype(f32)
    return [
        ("conv 3x3 fwd", "conv2d_forward", (x, w3, None, one, one, one)),
        ("conv 3x3 dil4 fwd", "conv2d_forward", (x, w3, None, one, (4, 4), (4, 4))),
        ("conv 3x3 bwd", "conv2d_backward", (x, w3, gy3, one, one, one)),
        ("conv 1x1 fwd", "conv2d_forward", (x, w1, None, one, zero, one)),
        ("dynfilter fwd", "dynfilter_forward", (hm, filt)),
        ("dynfilter bwd", "dynfilter_backward", (hm, filt, hm)),
        ("bilinear x2 fwd", "bilinear_forward", (small, 2)),
        ("bilinear x2 bwd", "bilinear_backward", (hm, 2, small.shape[2:])),
        ("maxpool fwd", "maxpool2_forward", (x,)),
    ]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller shapes")
    args = ap.parse_args(argv)
    table = kernels.backends()
    if "compiled" not in table:
        print("compiled kernels are not built; only the fallback is available", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'compiled ms':>12} {'python ms':>12} {'speedup':>8}")
    for label, name, call_args in cases(rng, args.quick):
        tc = _time(lambda: table["compiled"][name](*call_args), args.repeat)
        tp = _time(lambda: table["python"][name](*call_args), args.repeat)
        print(f"{label:<20} {tc * 1e3:>12.3f} {tp * 1e3:>12.3f} {tp / tc:>8.2f}")
    spec = preset_spec("tiny")
    results = {}
    for backend in ("compiled", "python"):
        kernels.use_backend(backend)
        model = build_ddpnet(spec, rng=0)
        results[backend] = benchmark_fps(model, (1, 3, 64, 64), frames=10 if args.quick else 50, warmup=3)
    kernels.use_backend("compiled")
    tc, tp = results["compiled"].mean_ms, results["python"].mean_ms
    print(f"{'tiny net forward':<20} {tc:>12.3f} {tp:>12.3f} {tp / tc:>8.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
