"""Pure-NumPy kernels.

Selected at import when the compiled core is unavailable (or when
``DDPNET_PURE=1``). Every function here has a twin in ``_ckernels.pyx`` with
the same signature; the test suite checks the two against each other.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# above this many im2col elements the tap-by-tap path is used instead
_IM2COL_LIMIT = 1 << 24


def conv_out_extent(size: int, k: int, s: int, p: int, d: int) -> int:
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _tap(xp, i, j, ho, wo, stride, dil):
    sh, sw = stride
    dh, dw = dil
    return xp[:, :, i * dh: i * dh + sh * (ho - 1) + 1: sh, j * dw: j * dw + sw * (wo - 1) + 1: sw]


def _im2col(xp, kh, kw, ho, wo, stride, dil):
    n, c = xp.shape[:2]
    sh, sw = stride
    dh, dw = dil
    win = sliding_window_view(xp, (dh * (kh - 1) + 1, dw * (kw - 1) + 1), axis=(2, 3))
    win = win[:, :, : sh * (ho - 1) + 1: sh, : sw * (wo - 1) + 1: sw, ::dh, ::dw]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def conv2d_forward(x, w, bias, stride, pad, dil):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = conv_out_extent(h, kh, stride[0], pad[0], dil[0])
    wo = conv_out_extent(wd, kw, stride[1], pad[1], dil[1])
    xp = _pad(x, *pad)
    if kh == kw == 1 and tuple(stride) == (1, 1) and tuple(pad) == (0, 0):
        y = np.matmul(w.reshape(co, c), x.reshape(n, c, h * wd))
    elif n * c * kh * kw * ho * wo <= _IM2COL_LIMIT:
        y = np.matmul(w.reshape(co, -1), _im2col(xp, kh, kw, ho, wo, stride, dil))
    else:
        y = np.zeros((n, co, ho * wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = _tap(xp, i, j, ho, wo, stride, dil).reshape(n, c, ho * wo)
                y += np.matmul(np.ascontiguousarray(w[:, :, i, j]), xs)
    y = y.reshape(n, co, ho, wo)
    if bias is not None:
        y += bias.reshape(1, co, 1, 1)
    return np.ascontiguousarray(y)


def conv2d_backward(x, w, gy, stride, pad, dil):
    """Return (grad_input, grad_weight); the bias gradient is a plain reduction."""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    _, _, ho, wo = gy.shape
    ph, pw = pad
    g2 = gy.reshape(n, co, ho * wo)
    xp = _pad(x, ph, pw)
    if kh == kw == 1 and tuple(stride) == (1, 1) and tuple(pad) == (0, 0):
        x2 = x.reshape(n, c, h * wd)
        gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = np.matmul(w.reshape(co, c).T, g2).reshape(x.shape)
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw)
    gxp = np.zeros(xp.shape, dtype=x.dtype)
    gw = np.zeros(w.shape, dtype=x.dtype)
    if n * c * kh * kw * ho * wo <= _IM2COL_LIMIT:
        cols = _im2col(xp, kh, kw, ho, wo, stride, dil)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(w.reshape(co, -1).T, g2).reshape(n, c, kh, kw, ho, wo)
        for i in range(kh):
            for j in range(kw):
                _tap(gxp, i, j, ho, wo, stride, dil)[...] += gcols[:, :, i, j]
    else:
        for i in range(kh):
            for j in range(kw):
                xs = _tap(xp, i, j, ho, wo, stride, dil).reshape(n, c, ho * wo)
                gw[:, :, i, j] = np.matmul(g2, xs.transpose(0, 2, 1)).sum(axis=0)
                gt = np.matmul(np.ascontiguousarray(w[:, :, i, j]).T, g2)
                _tap(gxp, i, j, ho, wo, stride, dil)[...] += gt.reshape(n, c, ho, wo)
    gx = gxp[:, :, ph: ph + h, pw: pw + wd]
    return np.ascontiguousarray(gx), gw


def dynfilter_forward(hm, filters):
    n, c, h, w = hm.shape
    kk = filters.shape[1]
    k = int(round(kk ** 0.5))
    r = k // 2
    hp = np.pad(hm, ((0, 0), (0, 0), (r, k - 1 - r), (r, k - 1 - r)))
    out = np.zeros_like(hm)
    for i in range(k):
        for j in range(k):
            out += filters[:, i * k + j: i * k + j + 1] * hp[:, :, i: i + h, j: j + w]
    return out


def dynfilter_backward(hm, filters, gy):
    n, c, h, w = hm.shape
    kk = filters.shape[1]
    k = int(round(kk ** 0.5))
    r = k // 2
    hp = np.pad(hm, ((0, 0), (0, 0), (r, k - 1 - r), (r, k - 1 - r)))
    ghp = np.zeros_like(hp)
    gf = np.empty_like(filters)
    for i in range(k):
        for j in range(k):
            t = i * k + j
            gf[:, t] = (gy * hp[:, :, i: i + h, j: j + w]).sum(axis=1)
            ghp[:, :, i: i + h, j: j + w] += filters[:, t: t + 1] * gy
    gh = ghp[:, :, r: r + h, r: r + w]
    return np.ascontiguousarray(gh), gf


def bilinear_axis(size: int, factor: int):
    """Source indices (lo, hi) and blend weight for each output coordinate.

    Half-pixel centres: ``s = (d + 0.5) / factor - 0.5`` clamped to the valid range.
    """
    d = np.arange(size * factor, dtype=np.float64)
    s = np.clip((d + 0.5) / factor - 0.5, 0.0, size - 1)
    lo = np.floor(s).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, s - lo


def bilinear_forward(x, factor):
    _, _, h, w = x.shape
    y0, y1, fy = bilinear_axis(h, factor)
    x0, x1, fx = bilinear_axis(w, factor)
    fy = fy.astype(x.dtype)[:, None]
    fx = fx.astype(x.dtype)
    rows = x[:, :, y0, :] * (1 - fy) + x[:, :, y1, :] * fy
    return np.ascontiguousarray(rows[..., x0] * (1 - fx) + rows[..., x1] * fx)


def bilinear_backward(gy, factor, in_hw):
    h, w = in_hw
    y0, y1, fy = bilinear_axis(h, factor)
    x0, x1, fx = bilinear_axis(w, factor)
    fx = fx.astype(gy.dtype)
    fy = fy.astype(gy.dtype)
    n, c, ho, _ = gy.shape
    # scatter along width; moving the axis first keeps add.at on contiguous slabs
    gyt = np.moveaxis(gy, 3, 0)
    grows = np.zeros((w, n, c, ho), dtype=gy.dtype)
    np.add.at(grows, x0, gyt * (1 - fx)[:, None, None, None])
    np.add.at(grows, x1, gyt * fx[:, None, None, None])
    grows = np.moveaxis(grows, 0, 2)  # (n, c, w, ho)
    gt = np.moveaxis(grows, 3, 0)  # (ho, n, c, w)
    gx = np.zeros((h, n, c, w), dtype=gy.dtype)
    np.add.at(gx, y0, gt * (1 - fy)[:, None, None, None])
    np.add.at(gx, y1, gt * fy[:, None, None, None])
    return np.ascontiguousarray(np.moveaxis(gx, 0, 2))


def _windows(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def maxpool2_forward(x):
    win = _windows(x)
    idx = win.argmax(axis=-1).astype(np.int8)  # first maximum in (dy, dx) scan order
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(gy, idx):
    n, c, ho, wo = gy.shape
    g = np.zeros((n, c, ho, wo, 4), dtype=gy.dtype)
    np.put_along_axis(g, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    g = g.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g.reshape(n, c, ho * 2, wo * 2))


def avgpool2_forward(x):
    return np.ascontiguousarray(_windows(x).mean(axis=-1, dtype=x.dtype))


def avgpool2_backward(gy):
    g = np.repeat(np.repeat(gy, 2, axis=2), 2, axis=3) * gy.dtype.type(0.25)
    return np.ascontiguousarray(g)
