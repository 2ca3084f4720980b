# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: convolution, dynamic filtering, bilinear resize, max pooling.

Signatures mirror ``ddpnet._fallback``. Convolution lowers row-chunks of the
output to im2col buffers and hands them to BLAS gemm; the others are direct
loops with the width axis innermost.
"""
import numpy as np

cimport numpy as cnp
from cython cimport floating
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

# im2col chunk budget, in elements
cdef enum:
    COL_BUDGET = 2097152


cdef inline Py_ssize_t _out_extent(Py_ssize_t size, Py_ssize_t k, Py_ssize_t s,
                                   Py_ssize_t p, Py_ssize_t d) noexcept nogil:
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


cdef void _gemm(bint ta, bint tb, int m, int n, int k, floating alpha,
                floating* a, int lda, floating* b, int ldb, floating beta,
                floating* c, int ldc) noexcept nogil:
    # row-major C(m,n) = alpha*op(A)(m,k) @ op(B)(k,n) + beta*C, via column-major BLAS on the transposes
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    if floating is float:
        sgemm(&cb, &ca, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)
    else:
        dgemm(&cb, &ca, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef inline void _valid_cols(Py_ssize_t off, Py_ssize_t s, Py_ssize_t w, Py_ssize_t wo,
                             Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns ox in [lo, hi) read input column ox*s + off inside [0, w)
    cdef Py_ssize_t a = 0, b = 0
    if off < 0:
        a = (-off + s - 1) // s
    if w - off > 0:
        b = (w - off + s - 1) // s
    if b > wo:
        b = wo
    if a > b:
        a = b
    lo[0] = a
    hi[0] = b


cdef void _im2col(const floating* x, floating* col, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
                  Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t dh, Py_ssize_t dw,
                  Py_ssize_t r0, Py_ssize_t r1, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t ci, i, j, oy, ox, iy, row = 0, pos
    cdef Py_ssize_t ncols = (r1 - r0) * wo, lo, hi
    cdef const floating* plane
    cdef const floating* src
    for ci in range(c):
        plane = x + ci * h * w
        for i in range(kh):
            for j in range(kw):
                pos = row * ncols
                _valid_cols(j * dw - pw, sw, w, wo, &lo, &hi)
                for oy in range(r0, r1):
                    iy = oy * sh - ph + i * dh
                    if iy < 0 or iy >= h:
                        for ox in range(wo):
                            col[pos + ox] = 0
                    else:
                        for ox in range(lo):
                            col[pos + ox] = 0
                        src = plane + iy * w + j * dw - pw
                        for ox in range(lo, hi):
                            col[pos + ox] = src[ox * sw]
                        for ox in range(hi, wo):
                            col[pos + ox] = 0
                    pos += wo
                row += 1


cdef void _col2im(const floating* col, floating* gx, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
                  Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t dh, Py_ssize_t dw,
                  Py_ssize_t r0, Py_ssize_t r1, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t ci, i, j, oy, ox, iy, row = 0, pos
    cdef Py_ssize_t ncols = (r1 - r0) * wo, lo, hi
    cdef floating* plane
    cdef floating* dst
    for ci in range(c):
        plane = gx + ci * h * w
        for i in range(kh):
            for j in range(kw):
                pos = row * ncols
                _valid_cols(j * dw - pw, sw, w, wo, &lo, &hi)
                for oy in range(r0, r1):
                    iy = oy * sh - ph + i * dh
                    if 0 <= iy < h:
                        dst = plane + iy * w + j * dw - pw
                        for ox in range(lo, hi):
                            dst[ox * sw] += col[pos + ox]
                    pos += wo
                row += 1


cdef Py_ssize_t _chunk_rows(Py_ssize_t ckk, Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t rows = COL_BUDGET // (ckk * wo)
    if rows < 1:
        rows = 1
    if rows > ho:
        rows = ho
    return rows


def conv2d_forward(x, w, bias, stride, pad, dil):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    if x.dtype == np.float32:
        return _conv_fwd[float](x, w, bias, stride, pad, dil)
    return _conv_fwd[double](x, w, bias, stride, pad, dil)


def conv2d_backward(x, w, gy, stride, pad, dil):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    gy = np.ascontiguousarray(gy, dtype=x.dtype)
    if x.dtype == np.float32:
        return _conv_bwd[float](x, w, gy, stride, pad, dil)
    return _conv_bwd[double](x, w, gy, stride, pad, dil)


cdef object _conv_fwd(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] w,
                      bias, stride, pad, dil):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t sh = stride[0], sw = stride[1], ph = pad[0], pw = pad[1]
    cdef Py_ssize_t dh = dil[0], dw = dil[1]
    cdef Py_ssize_t ho = _out_extent(h, kh, sh, ph, dh), wo = _out_extent(wd, kw, sw, pw, dw)
    cdef Py_ssize_t ckk = c * kh * kw, hw = ho * wo
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, co, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] y = out
    cdef bint direct = kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0
    cdef Py_ssize_t rows = _chunk_rows(ckk, ho, wo), b, r0, r1
    colbuf = np.empty(0 if direct else ckk * rows * wo, dtype=dtype)
    cdef floating[::1] col = colbuf
    with nogil:
        for b in range(n):
            if direct:
                _gemm[floating](False, False, <int>co, <int>hw, <int>c, 1,
                                <floating*>&w[0, 0, 0, 0], <int>c,
                                <floating*>&x[b, 0, 0, 0], <int>hw, 0, &y[b, 0, 0, 0], <int>hw)
                continue
            r0 = 0
            while r0 < ho:
                r1 = r0 + rows if r0 + rows < ho else ho
                _im2col[floating](&x[b, 0, 0, 0], &col[0], c, h, wd, kh, kw, sh, sw,
                                  ph, pw, dh, dw, r0, r1, wo)
                _gemm[floating](False, False, <int>co, <int>((r1 - r0) * wo), <int>ckk, 1,
                                <floating*>&w[0, 0, 0, 0], <int>ckk, &col[0], <int>((r1 - r0) * wo),
                                0, &y[b, 0, r0, 0], <int>hw)
                r0 = r1
    if bias is not None:
        out += np.asarray(bias, dtype=dtype).reshape(1, co, 1, 1)
    return out


cdef object _conv_bwd(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] w,
                      const floating[:, :, :, ::1] gy, stride, pad, dil):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t sh = stride[0], sw = stride[1], ph = pad[0], pw = pad[1]
    cdef Py_ssize_t dh = dil[0], dw = dil[1]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t ckk = c * kh * kw, hw = ho * wo, ncols
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((n, c, h, wd), dtype=dtype)
    gw_arr = np.zeros((co, c, kh, kw), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef floating[:, :, :, ::1] gw = gw_arr
    cdef bint direct = kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0
    cdef Py_ssize_t rows = _chunk_rows(ckk, ho, wo), b, r0, r1
    colbuf = np.empty(0 if direct else ckk * rows * wo, dtype=dtype)
    gcolbuf = np.empty(0 if direct else ckk * rows * wo, dtype=dtype)
    cdef floating[::1] col = colbuf
    cdef floating[::1] gcol = gcolbuf
    with nogil:
        for b in range(n):
            if direct:
                # gw(co,c) += gy(co,hw) @ x(c,hw)^T ; gx(c,hw) = w(co,c)^T @ gy
                _gemm[floating](False, True, <int>co, <int>c, <int>hw, 1,
                                <floating*>&gy[b, 0, 0, 0], <int>hw, <floating*>&x[b, 0, 0, 0], <int>hw,
                                1, &gw[0, 0, 0, 0], <int>c)
                _gemm[floating](True, False, <int>c, <int>hw, <int>co, 1,
                                <floating*>&w[0, 0, 0, 0], <int>c, <floating*>&gy[b, 0, 0, 0], <int>hw,
                                0, &gx[b, 0, 0, 0], <int>hw)
                continue
            r0 = 0
            while r0 < ho:
                r1 = r0 + rows if r0 + rows < ho else ho
                ncols = (r1 - r0) * wo
                _im2col[floating](&x[b, 0, 0, 0], &col[0], c, h, wd, kh, kw, sh, sw,
                                  ph, pw, dh, dw, r0, r1, wo)
                _gemm[floating](False, True, <int>co, <int>ckk, <int>ncols, 1,
                                <floating*>&gy[b, 0, r0, 0], <int>hw, &col[0], <int>ncols,
                                1, &gw[0, 0, 0, 0], <int>ckk)
                _gemm[floating](True, False, <int>ckk, <int>ncols, <int>co, 1,
                                <floating*>&w[0, 0, 0, 0], <int>ckk, <floating*>&gy[b, 0, r0, 0], <int>hw,
                                0, &gcol[0], <int>ncols)
                _col2im[floating](&gcol[0], &gx[b, 0, 0, 0], c, h, wd, kh, kw, sh, sw,
                                  ph, pw, dh, dw, r0, r1, wo)
                r0 = r1
    return gx_arr, gw_arr


def dynfilter_forward(hm, filters):
    hm = np.ascontiguousarray(hm)
    filters = np.ascontiguousarray(filters, dtype=hm.dtype)
    out = np.zeros_like(hm)
    if hm.dtype == np.float32:
        _dyn_fwd[float](hm, filters, out)
    else:
        _dyn_fwd[double](hm, filters, out)
    return out


cdef inline Py_ssize_t _isqrt(Py_ssize_t v) noexcept nogil:
    cdef Py_ssize_t k = 0
    while (k + 1) * (k + 1) <= v:
        k += 1
    return k


cdef void _dyn_fwd(const floating[:, :, :, ::1] hm, const floating[:, :, :, ::1] f,
                   floating[:, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = hm.shape[0], c = hm.shape[1], h = hm.shape[2], w = hm.shape[3]
    cdef Py_ssize_t k = _isqrt(f.shape[1]), r = k // 2
    cdef Py_ssize_t b, i, j, t, ch, y, x, sy, sx, x_lo, x_hi
    for b in range(n):
        for i in range(k):
            for j in range(k):
                t = i * k + j
                x_lo = r - j if r - j > 0 else 0
                x_hi = w + r - j if w + r - j < w else w
                for ch in range(c):
                    for y in range(h):
                        sy = y + i - r
                        if sy < 0 or sy >= h:
                            continue
                        for x in range(x_lo, x_hi):
                            sx = x + j - r
                            out[b, ch, y, x] += f[b, t, y, x] * hm[b, ch, sy, sx]


def dynfilter_backward(hm, filters, gy):
    hm = np.ascontiguousarray(hm)
    filters = np.ascontiguousarray(filters, dtype=hm.dtype)
    gy = np.ascontiguousarray(gy, dtype=hm.dtype)
    gh = np.zeros_like(hm)
    gf = np.zeros_like(filters)
    if hm.dtype == np.float32:
        _dyn_bwd[float](hm, filters, gy, gh, gf)
    else:
        _dyn_bwd[double](hm, filters, gy, gh, gf)
    return gh, gf


cdef void _dyn_bwd(const floating[:, :, :, ::1] hm, const floating[:, :, :, ::1] f,
                   const floating[:, :, :, ::1] gy, floating[:, :, :, ::1] gh,
                   floating[:, :, :, ::1] gf) noexcept nogil:
    cdef Py_ssize_t n = hm.shape[0], c = hm.shape[1], h = hm.shape[2], w = hm.shape[3]
    cdef Py_ssize_t k = _isqrt(f.shape[1]), r = k // 2
    cdef Py_ssize_t b, i, j, t, ch, y, x, sy, sx, x_lo, x_hi
    for b in range(n):
        for i in range(k):
            for j in range(k):
                t = i * k + j
                x_lo = r - j if r - j > 0 else 0
                x_hi = w + r - j if w + r - j < w else w
                for ch in range(c):
                    for y in range(h):
                        sy = y + i - r
                        if sy < 0 or sy >= h:
                            continue
                        for x in range(x_lo, x_hi):
                            sx = x + j - r
                            gf[b, t, y, x] += gy[b, ch, y, x] * hm[b, ch, sy, sx]
                            gh[b, ch, sy, sx] += f[b, t, y, x] * gy[b, ch, y, x]


def _axis_tables(Py_ssize_t size, Py_ssize_t factor):
    from ddpnet._fallback import bilinear_axis
    lo, hi, frac = bilinear_axis(size, factor)
    return lo.astype(np.intp), hi.astype(np.intp), frac


def bilinear_forward(x, factor):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    y0, y1, fy = _axis_tables(h, factor)
    x0, x1, fx = _axis_tables(w, factor)
    out = np.empty((n, c, h * factor, w * factor), dtype=x.dtype)
    if x.dtype == np.float32:
        _bil_fwd[float](x, out, y0, y1, fy.astype(np.float32), x0, x1, fx.astype(np.float32))
    else:
        _bil_fwd[double](x, out, y0, y1, fy, x0, x1, fx)
    return out


cdef void _bil_fwd(const floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
                   const Py_ssize_t[::1] y0, const Py_ssize_t[::1] y1, const floating[::1] fy,
                   const Py_ssize_t[::1] x0, const Py_ssize_t[::1] x1, const floating[::1] fx) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t b, ch, oy, ox
    cdef floating top, bot, wy
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                wy = fy[oy]
                for ox in range(wo):
                    top = x[b, ch, y0[oy], x0[ox]] * (1 - fx[ox]) + x[b, ch, y0[oy], x1[ox]] * fx[ox]
                    bot = x[b, ch, y1[oy], x0[ox]] * (1 - fx[ox]) + x[b, ch, y1[oy], x1[ox]] * fx[ox]
                    out[b, ch, oy, ox] = top * (1 - wy) + bot * wy


def bilinear_backward(gy, factor, in_hw):
    gy = np.ascontiguousarray(gy)
    h, w = in_hw
    y0, y1, fy = _axis_tables(h, factor)
    x0, x1, fx = _axis_tables(w, factor)
    gx = np.zeros((gy.shape[0], gy.shape[1], h, w), dtype=gy.dtype)
    if gy.dtype == np.float32:
        _bil_bwd[float](gy, gx, y0, y1, fy.astype(np.float32), x0, x1, fx.astype(np.float32))
    else:
        _bil_bwd[double](gy, gx, y0, y1, fy, x0, x1, fx)
    return gx


cdef void _bil_bwd(const floating[:, :, :, ::1] gy, floating[:, :, :, ::1] gx,
                   const Py_ssize_t[::1] y0, const Py_ssize_t[::1] y1, const floating[::1] fy,
                   const Py_ssize_t[::1] x0, const Py_ssize_t[::1] x1, const floating[::1] fx) noexcept nogil:
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t b, ch, oy, ox
    cdef floating g, wy
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                wy = fy[oy]
                for ox in range(wo):
                    g = gy[b, ch, oy, ox]
                    gx[b, ch, y0[oy], x0[ox]] += g * (1 - wy) * (1 - fx[ox])
                    gx[b, ch, y0[oy], x1[ox]] += g * (1 - wy) * fx[ox]
                    gx[b, ch, y1[oy], x0[ox]] += g * wy * (1 - fx[ox])
                    gx[b, ch, y1[oy], x1[ox]] += g * wy * fx[ox]


def maxpool2_forward(x):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    if x.dtype == np.float32:
        _max_fwd[float](x, out, idx)
    else:
        _max_fwd[double](x, out, idx)
    return out, idx


cdef void _max_fwd(const floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
                   cnp.int8_t[:, :, :, ::1] idx) noexcept nogil:
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t b, ch, oy, ox, t
    cdef floating best, v
    cdef cnp.int8_t arg
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = x[b, ch, 2 * oy, 2 * ox]
                    arg = 0
                    for t in range(1, 4):
                        v = x[b, ch, 2 * oy + t // 2, 2 * ox + t % 2]
                        if v > best:
                            best = v
                            arg = <cnp.int8_t>t
                    out[b, ch, oy, ox] = best
                    idx[b, ch, oy, ox] = arg


def maxpool2_backward(gy, idx):
    gy = np.ascontiguousarray(gy)
    n, c, ho, wo = gy.shape
    gx = np.zeros((n, c, ho * 2, wo * 2), dtype=gy.dtype)
    if gy.dtype == np.float32:
        _max_bwd[float](gy, np.ascontiguousarray(idx), gx)
    else:
        _max_bwd[double](gy, np.ascontiguousarray(idx), gx)
    return gx


cdef void _max_bwd(const floating[:, :, :, ::1] gy, const cnp.int8_t[:, :, :, ::1] idx,
                   floating[:, :, :, ::1] gx) noexcept nogil:
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t b, ch, oy, ox, t
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    t = idx[b, ch, oy, ox]
                    gx[b, ch, 2 * oy + t // 2, 2 * ox + t % 2] = gy[b, ch, oy, ox]
