"""Kernel backend selection.

The compiled core (``_ckernels``) is used when it imports; otherwise the NumPy
fallback. Set ``DDPNET_PURE=1`` to force the fallback.
"""
from __future__ import annotations

import os

from ddpnet import _fallback

_NAMES = (
    "conv2d_forward",
    "conv2d_backward",
    "dynfilter_forward",
    "dynfilter_backward",
    "bilinear_forward",
    "bilinear_backward",
    "maxpool2_forward",
    "maxpool2_backward",
)


def _load_compiled():
    if os.environ.get("DDPNET_PURE", "") not in ("", "0"):
        return None
    try:
        from ddpnet import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()
BACKEND = "compiled" if _compiled is not None else "python"

conv_out_extent = _fallback.conv_out_extent
avgpool2_forward = _fallback.avgpool2_forward
avgpool2_backward = _fallback.avgpool2_backward

_impl = _compiled if _compiled is not None else _fallback
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
dynfilter_forward = _impl.dynfilter_forward
dynfilter_backward = _impl.dynfilter_backward
bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward


def backends() -> dict:
    """Kernel tables keyed by backend name, for benchmarks and cross-checks."""
    out = {"python": {name: getattr(_fallback, name) for name in _NAMES}}
    if _compiled is not None:
        out["compiled"] = {name: getattr(_compiled, name) for name in _NAMES}
    return out


def use_backend(name: str) -> str:
    """Rebind the kernel entry points to ``name`` ("compiled" or "python"); returns the previous backend."""
    global BACKEND
    table = backends()
    if name not in table:
        raise ValueError(f"kernel backend {name!r} is not available (have {sorted(table)})")
    previous = BACKEND
    g = globals()
    for fn, impl in table[name].items():
        g[fn] = impl
    BACKEND = name
    return previous
