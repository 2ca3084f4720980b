import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddpnet import kernels, ops
from ddpnet.tensor import Tensor

TABLE = kernels.backends()
needs_compiled = pytest.mark.skipif("compiled" not in TABLE, reason="compiled kernels are not built")


def both(name, *args):
    return TABLE["compiled"][name](*args), TABLE["python"][name](*args)


def close(a, b, dtype):
    tol = 1e-4 if dtype == np.float32 else 1e-10
    np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


@needs_compiled
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 4), st.integers(3, 9), st.integers(3, 9),
       st.sampled_from([1, 3, 5]), st.integers(1, 3), st.integers(0, 4), st.integers(1, 3),
       st.sampled_from([np.float32, np.float64]), st.integers(0, 1000))
def test_conv_backends_agree(n, c, co, h, w, k, stride, pad, dil, dtype, seed):
    if min(h, w) + 2 * pad - dil * (k - 1) < 1:
        pad = dil * (k - 1)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w)).astype(dtype)
    wt = rng.standard_normal((co, c, k, k)).astype(dtype)
    args = ((stride, stride), (pad, pad), (dil, dil))
    yc, yp = both("conv2d_forward", x, wt, None, *args)
    close(yc, yp, dtype)
    gy = rng.standard_normal(yc.shape).astype(dtype)
    (gxc, gwc), (gxp, gwp) = both("conv2d_backward", x, wt, gy, *args)
    close(gxc, gxp, dtype)
    close(gwc, gwp, dtype)


@needs_compiled
@pytest.mark.parametrize("stride, pad, dil", [((2, 1), (0, 2), (1, 2)), ((1, 3), (3, 1), (2, 1))])
def test_conv_backends_agree_anisotropic(rng, stride, pad, dil):
    x = rng.standard_normal((2, 3, 11, 13))
    w = rng.standard_normal((4, 3, 3, 3))
    yc, yp = both("conv2d_forward", x, w, None, stride, pad, dil)
    close(yc, yp, np.float64)
    gy = rng.standard_normal(yc.shape)
    for a, b in zip(*both("conv2d_backward", x, w, gy, stride, pad, dil)):
        close(a, b, np.float64)


@needs_compiled
@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 7), st.integers(1, 7), st.sampled_from([1, 3, 5]),
       st.sampled_from([np.float32, np.float64]), st.integers(0, 1000))
def test_dynfilter_backends_agree(n, c, h, w, k, dtype, seed):
    rng = np.random.default_rng(seed)
    hm = rng.standard_normal((n, c, h, w)).astype(dtype)
    f = rng.random((n, k * k, h, w)).astype(dtype)
    close(*both("dynfilter_forward", hm, f), dtype)
    gy = rng.standard_normal((n, c, h, w)).astype(dtype)
    for a, b in zip(*both("dynfilter_backward", hm, f, gy)):
        close(a, b, dtype)


@needs_compiled
@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.sampled_from([2, 3, 4, 8]),
       st.sampled_from([np.float32, np.float64]), st.integers(0, 1000))
def test_bilinear_backends_agree(c, h, w, factor, dtype, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, c, h, w)).astype(dtype)
    close(*both("bilinear_forward", x, factor), dtype)
    gy = rng.standard_normal((1, c, h * factor, w * factor)).astype(dtype)
    close(*both("bilinear_backward", gy, factor, (h, w)), dtype)


@needs_compiled
@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(0, 1000))
def test_maxpool_backends_agree(c, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, c, 2 * h, 2 * w))
    (yc, ic), (yp, ip) = both("maxpool2_forward", x)
    assert np.array_equal(yc, yp)
    gy = rng.standard_normal(yc.shape)
    assert np.array_equal(TABLE["compiled"]["maxpool2_backward"](gy, ic), TABLE["python"]["maxpool2_backward"](gy, ip))


def test_bilinear_backward_is_adjoint_of_forward(rng):
    # <U x, g> == <x, U^T g> for the linear upsampling map U
    x = rng.standard_normal((1, 2, 3, 4))
    g = rng.standard_normal((1, 2, 9, 12))
    for table in TABLE.values():
        lhs = (table["bilinear_forward"](x, 3) * g).sum()
        rhs = (x * table["bilinear_backward"](g, 3, (3, 4))).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)


@needs_compiled
def test_use_backend_switches_and_restores(rng):
    x = Tensor.wrap(rng.standard_normal((1, 2, 6, 6)))
    w = Tensor.wrap(rng.standard_normal((3, 2, 3, 3)))
    p = ops.ConvParams(2, 3, 3, 1, 1)
    previous = kernels.use_backend("python")
    try:
        assert kernels.BACKEND == "python"
        assert kernels.conv2d_forward is TABLE["python"]["conv2d_forward"]
        y_python = ops.conv2d(x, w, params=p).data
    finally:
        kernels.use_backend(previous)
    assert kernels.BACKEND == previous
    close(ops.conv2d(x, w, params=p).data, y_python, np.float64)


def test_use_backend_rejects_unknown_name():
    with pytest.raises(ValueError):
        kernels.use_backend("gpu")


def _backend_in_subprocess(env_value):
    env = dict(os.environ)
    env.pop("DDPNET_PURE", None)
    if env_value is not None:
        env["DDPNET_PURE"] = env_value
    out = subprocess.run([sys.executable, "-c", "import ddpnet.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_environment_forces_fallback():
    assert _backend_in_subprocess("1") == "python"


@needs_compiled
def test_compiled_is_the_default():
    assert _backend_in_subprocess(None) == "compiled"
    assert _backend_in_subprocess("0") == "compiled"
