# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: conv2d, maxpool2d, bilinear resize, batchnorm sweeps and
relu backward.

float64 C-contiguous arrays only.  Inner loops run over the last (contiguous)
axis so the C compiler can vectorize them.  Semantics match numpy_backend
exactly; cross-backend equivalence is covered by tests.
"""

import numpy as np

# zero-margin embed planes for the stride-1 input-gradient pass, keyed by
# shape; bounded by the distinct conv shapes in a model
_embed_scratch = {}


cdef void _fwd3_s1(const double[:, :, :, ::1] xp, const double[:, :, :, ::1] w,
                   double[:, :, :, ::1] y, Py_ssize_t oi, Py_ssize_t oj) noexcept nogil:
    """Stride-1 3x3 cross-correlation accumulated into y (pre-zeroed).

    All nine taps are fused into one pass per output row, so each y element
    is loaded and stored once instead of nine times.  (oi, oj) offset the
    read window, which lets the caller evaluate only an interior region.
    """
    cdef Py_ssize_t n = y.shape[0], co = y.shape[1], ho = y.shape[2], wo = y.shape[3]
    cdef Py_ssize_t ci = xp.shape[1]
    cdef Py_ssize_t b, o, c, i, j
    cdef double w00, w01, w02, w10, w11, w12, w20, w21, w22
    cdef double *yrow
    cdef const double *x0
    cdef const double *x1
    cdef const double *x2
    for b in range(n):
        for i in range(ho):
            for c in range(ci):
                x0 = &xp[b, c, i + oi, oj]
                x1 = &xp[b, c, i + oi + 1, oj]
                x2 = &xp[b, c, i + oi + 2, oj]
                for o in range(co):
                    yrow = &y[b, o, i, 0]
                    w00 = w[o, c, 0, 0]; w01 = w[o, c, 0, 1]; w02 = w[o, c, 0, 2]
                    w10 = w[o, c, 1, 0]; w11 = w[o, c, 1, 1]; w12 = w[o, c, 1, 2]
                    w20 = w[o, c, 2, 0]; w21 = w[o, c, 2, 1]; w22 = w[o, c, 2, 2]
                    for j in range(wo):
                        yrow[j] += (w00 * x0[j] + w01 * x0[j + 1] + w02 * x0[j + 2]
                                    + w10 * x1[j] + w11 * x1[j + 1] + w12 * x1[j + 2]
                                    + w20 * x2[j] + w21 * x2[j + 1] + w22 * x2[j + 2])


cdef void _fwd_s1(const double[:, :, :, ::1] xp, const double[:, :, :, ::1] w,
                  double[:, :, :, ::1] y) noexcept nogil:
    """Stride-1 cross-correlation for arbitrary kernel sizes.

    Each input row is read once per (c,p) and reused across every output
    channel, so the working set per output row stays inside L1.
    """
    cdef Py_ssize_t n = y.shape[0], co = y.shape[1], ho = y.shape[2], wo = y.shape[3]
    cdef Py_ssize_t ci = xp.shape[1]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t b, o, c, i, j, p, q
    cdef double wv
    cdef double *yrow
    cdef const double *xrow
    if kh == 3 and kw == 3:
        _fwd3_s1(xp, w, y, 0, 0)
        return
    for b in range(n):
        for i in range(ho):
            for c in range(ci):
                for p in range(kh):
                    xrow = &xp[b, c, i + p, 0]
                    for o in range(co):
                        yrow = &y[b, o, i, 0]
                        for q in range(kw):
                            wv = w[o, c, p, q]
                            for j in range(wo):
                                yrow[j] += wv * xrow[j + q]


def _gw_s1(xp_arr, gy_arr, Py_ssize_t kh, Py_ssize_t kw):
    """Stride-1 kernel gradient: one GEMM per tap on flattened planes.

    Shifting the flat index by p*wp + q aligns each input plane with the
    output gradient for that tap; the stray cross-row products hit the
    zero margin of the embedded gradient and vanish.  BLAS register
    blocking beats a hand-written dot at these channel counts.
    """
    cdef Py_ssize_t n = xp_arr.shape[0], ci = xp_arr.shape[1]
    cdef Py_ssize_t hp = xp_arr.shape[2], wp = xp_arr.shape[3]
    cdef Py_ssize_t co = gy_arr.shape[1], ho = gy_arr.shape[2], wo = gy_arr.shape[3]
    cdef Py_ssize_t s = hp * wp
    cdef Py_ssize_t p, q, off, m
    xf = xp_arr.reshape(n, ci, s)
    if ho == hp and wo == wp:
        ge = gy_arr.reshape(n, co, s)
    else:
        key = ("gw", n, co, hp, wp, ho, wo)
        emb = _embed_scratch.get(key)
        if emb is None:
            emb = np.zeros((n, co, hp, wp))
            _embed_scratch[key] = emb
        emb[:, :, :ho, :wo] = gy_arr
        ge = emb.reshape(n, co, s)
    gw = np.empty((co, ci, kh, kw))
    for p in range(kh):
        for q in range(kw):
            off = p * wp + q
            m = s - off
            src = xf[:, :, off:] if off else xf
            gw[:, :, p, q] = np.matmul(ge[:, :, :m], src.transpose(0, 2, 1)).sum(axis=0)
    return gw


def conv2d_forward(double[:, :, :, ::1] xp, double[:, :, :, ::1] w, int stride,
                   bias=None):
    cdef Py_ssize_t n = xp.shape[0], ci = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    if bias is None:
        out = np.zeros((n, co, ho, wo))
    else:
        # seed the accumulator with the bias instead of adding it afterwards
        out = np.empty((n, co, ho, wo))
        out[:] = np.asarray(bias).reshape(1, co, 1, 1)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t b, o, c, i, j, p, q
    cdef double wv
    if stride == 1:
        _fwd_s1(xp, w, y)
        return out
    for b in range(n):
        for o in range(co):
            for c in range(ci):
                for p in range(kh):
                    for q in range(kw):
                        wv = w[o, c, p, q]
                        for i in range(ho):
                            for j in range(wo):
                                y[b, o, i, j] += wv * xp[b, c, i * stride + p, j * stride + q]
    return out


def conv2d_backward(double[:, :, :, ::1] xp, double[:, :, :, ::1] w,
                    double[:, :, :, ::1] gy, int stride, int pad,
                    bint want_gx=True):
    """Gradients (gx, gw) where gx is for the unpadded input of shape
    (hp - 2*pad, wp - 2*pad); xp is the padded activation buffer.  With
    want_gx False the input-gradient pass is skipped and gx is None."""
    cdef Py_ssize_t n = xp.shape[0], ci = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    cdef double[:, :, :, ::1] gw
    cdef double[:, :, :, ::1] gx_view
    cdef double[:, :, :, ::1] gp_view
    cdef double[:, :, :, ::1] wr_view
    cdef double[:, :, :, ::1] gxp
    cdef Py_ssize_t b, o, c, i, j, p, q
    cdef double wv, acc, g
    if stride == 1:
        gw_arr = _gw_s1(np.asarray(xp), np.asarray(gy), kh, kw)
        if not want_gx:
            return None, gw_arr
        # input gradient is the full correlation of gy with rotated kernels,
        # which is just the forward kernel on a zero-embedded gradient; the
        # read offset drops the padding margins without a crop pass
        key = (n, co, ho + 2 * (kh - 1), wo + 2 * (kw - 1))
        gp = _embed_scratch.get(key)
        if gp is None:
            # reused across calls: only the interior is ever rewritten, so
            # the zero margins survive
            gp = np.zeros(key)
            _embed_scratch[key] = gp
        gp[:, :, kh - 1 : kh - 1 + ho, kw - 1 : kw - 1 + wo] = np.asarray(gy)
        wr = np.ascontiguousarray(np.asarray(w)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gp_view = gp
        wr_view = wr
        if kh == 3 and kw == 3:
            gx_arr = np.zeros((n, ci, hp - 2 * pad, wp - 2 * pad))
            gx_view = gx_arr
            _fwd3_s1(gp_view, wr_view, gx_view, pad, pad)
            return gx_arr, gw_arr
        gxp_arr = np.zeros((n, ci, hp, wp))
        gxp = gxp_arr
        _fwd_s1(gp_view, wr_view, gxp)
        if pad:
            return np.ascontiguousarray(gxp_arr[:, :, pad:hp - pad, pad:wp - pad]), gw_arr
        return gxp_arr, gw_arr
    gw_arr = np.zeros((co, ci, kh, kw))
    gw = gw_arr
    if not want_gx:
        for b in range(n):
            for o in range(co):
                for c in range(ci):
                    for p in range(kh):
                        for q in range(kw):
                            acc = 0.0
                            for i in range(ho):
                                for j in range(wo):
                                    acc += gy[b, o, i, j] * xp[b, c, i * stride + p,
                                                               j * stride + q]
                            gw[o, c, p, q] += acc
        return None, gw_arr
    gxp_arr = np.zeros((n, ci, hp, wp))
    gxp = gxp_arr
    for b in range(n):
        for o in range(co):
            for c in range(ci):
                for p in range(kh):
                    for q in range(kw):
                        wv = w[o, c, p, q]
                        acc = 0.0
                        for i in range(ho):
                            for j in range(wo):
                                g = gy[b, o, i, j]
                                gxp[b, c, i * stride + p, j * stride + q] += g * wv
                                acc += g * xp[b, c, i * stride + p, j * stride + q]
                        gw[o, c, p, q] += acc
    if pad:
        return np.ascontiguousarray(gxp_arr[:, :, pad:hp - pad, pad:wp - pad]), gw_arr
    return gxp_arr, gw_arr


def maxpool2d_forward(double[:, :, :, ::1] x, int kernel, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - kernel) // stride + 1
    cdef Py_ssize_t wo = (w - kernel) // stride + 1
    y_arr = np.empty((n, c, ho, wo))
    idx_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef long long[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, i, j, p, q, iy, ix, best_at
    cdef double best, v
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[b, ch, i * stride, j * stride]
                    best_at = (i * stride) * w + j * stride
                    for p in range(kernel):
                        iy = i * stride + p
                        for q in range(kernel):
                            ix = j * stride + q
                            v = x[b, ch, iy, ix]
                            if v > best:
                                best = v
                                best_at = iy * w + ix
                    y[b, ch, i, j] = best
                    idx[b, ch, i, j] = best_at
    return y_arr, idx_arr


def maxpool2d_backward(long long[:, :, :, ::1] idx, double[:, :, :, ::1] gy,
                       int h, int w):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    gx_arr = np.zeros((n, c, h, w))
    cdef double[:, :, ::1] gx = gx_arr.reshape(n, c, h * w)
    cdef Py_ssize_t b, ch, i, j
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    gx[b, ch, idx[b, ch, i, j]] += gy[b, ch, i, j]
    return gx_arr


def bilinear_forward(double[:, :, :, ::1] x, int oh, int ow):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    y_arr = np.empty((n, c, oh, ow))
    cdef double[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t b, ch, i, j
    cdef Py_ssize_t y0, y1, x0, x1
    cdef double sy, sx, ty, tx, top, bot
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                sy = (i + 0.5) * h / oh - 0.5
                if sy < 0.0:
                    sy = 0.0
                if sy > h - 1.0:
                    sy = h - 1.0
                y0 = <Py_ssize_t>sy
                y1 = y0 + 1 if y0 + 1 < h else h - 1
                ty = sy - y0
                for j in range(ow):
                    sx = (j + 0.5) * w / ow - 0.5
                    if sx < 0.0:
                        sx = 0.0
                    if sx > w - 1.0:
                        sx = w - 1.0
                    x0 = <Py_ssize_t>sx
                    x1 = x0 + 1 if x0 + 1 < w else w - 1
                    tx = sx - x0
                    top = x[b, ch, y0, x0] * (1.0 - tx) + x[b, ch, y0, x1] * tx
                    bot = x[b, ch, y1, x0] * (1.0 - tx) + x[b, ch, y1, x1] * tx
                    y[b, ch, i, j] = top * (1.0 - ty) + bot * ty
    return y_arr


def bn2d_stats(double[:, :, :, ::1] x):
    """Per-channel sum and sum of squares over the N, H, W axes."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    sx_arr = np.zeros(c)
    sxx_arr = np.zeros(c)
    cdef double[::1] sx = sx_arr
    cdef double[::1] sxx = sxx_arr
    cdef Py_ssize_t b, ch, i, j
    cdef double s, ss, v
    cdef const double *row
    for b in range(n):
        for ch in range(c):
            s = 0.0
            ss = 0.0
            for i in range(h):
                row = &x[b, ch, i, 0]
                for j in range(w):
                    v = row[j]
                    s += v
                    ss += v * v
            sx[ch] += s
            sxx[ch] += ss
    return sx_arr, sxx_arr


def bn2d_grad_stats(double[:, :, :, ::1] g, double[:, :, :, ::1] x):
    """Per-channel sums of g and of g*x over the N, H, W axes."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    sg_arr = np.zeros(c)
    sgx_arr = np.zeros(c)
    cdef double[::1] sg = sg_arr
    cdef double[::1] sgx = sgx_arr
    cdef Py_ssize_t b, ch, i, j
    cdef double s, sx, gv
    cdef const double *grow
    cdef const double *xrow
    for b in range(n):
        for ch in range(c):
            s = 0.0
            sx = 0.0
            for i in range(h):
                grow = &g[b, ch, i, 0]
                xrow = &x[b, ch, i, 0]
                for j in range(w):
                    gv = grow[j]
                    s += gv
                    sx += gv * xrow[j]
            sg[ch] += s
            sgx[ch] += sx
    return sg_arr, sgx_arr


def bn2d_apply(double[:, :, :, ::1] x, double[::1] scale, double[::1] shift):
    """scale[c] * x + shift[c] in a single pass."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    y_arr = np.empty((n, c, h, w))
    cdef double[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t b, ch, i, j
    cdef double s, t
    cdef const double *xrow
    cdef double *yrow
    for b in range(n):
        for ch in range(c):
            s = scale[ch]
            t = shift[ch]
            for i in range(h):
                xrow = &x[b, ch, i, 0]
                yrow = &y[b, ch, i, 0]
                for j in range(w):
                    yrow[j] = xrow[j] * s + t
    return y_arr


def bn2d_grad_input(double[:, :, :, ::1] g, double[:, :, :, ::1] x,
                    double[::1] a, double[::1] b, double[::1] c):
    """a[ch]*g + b[ch]*x + c[ch] in a single pass (batchnorm input gradient)."""
    cdef Py_ssize_t n = x.shape[0], nc = x.shape[1], h = x.shape[2], w = x.shape[3]
    gx_arr = np.empty((n, nc, h, w))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t bb, ch, i, j
    cdef double av, bv, cv
    cdef const double *grow
    cdef const double *xrow
    cdef double *orow
    for bb in range(n):
        for ch in range(nc):
            av = a[ch]
            bv = b[ch]
            cv = c[ch]
            for i in range(h):
                grow = &g[bb, ch, i, 0]
                xrow = &x[bb, ch, i, 0]
                orow = &gx[bb, ch, i, 0]
                for j in range(w):
                    orow[j] = av * grow[j] + bv * xrow[j] + cv
    return gx_arr


def relu_backward(const double[::1] x, const double[::1] g):
    """g where x > 0 else 0, on flat views."""
    cdef Py_ssize_t m = x.shape[0]
    out_arr = np.empty(m)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t j
    for j in range(m):
        out[j] = g[j] if x[j] > 0.0 else 0.0
    return out_arr


def bilinear_backward(double[:, :, :, ::1] gy, int h, int w):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], oh = gy.shape[2], ow = gy.shape[3]
    gx_arr = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, ch, i, j
    cdef Py_ssize_t y0, y1, x0, x1
    cdef double sy, sx, ty, tx, g
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                sy = (i + 0.5) * h / oh - 0.5
                if sy < 0.0:
                    sy = 0.0
                if sy > h - 1.0:
                    sy = h - 1.0
                y0 = <Py_ssize_t>sy
                y1 = y0 + 1 if y0 + 1 < h else h - 1
                ty = sy - y0
                for j in range(ow):
                    sx = (j + 0.5) * w / ow - 0.5
                    if sx < 0.0:
                        sx = 0.0
                    if sx > w - 1.0:
                        sx = w - 1.0
                    x0 = <Py_ssize_t>sx
                    x1 = x0 + 1 if x0 + 1 < w else w - 1
                    tx = sx - x0
                    g = gy[b, ch, i, j]
                    gx[b, ch, y0, x0] += g * (1.0 - ty) * (1.0 - tx)
                    gx[b, ch, y0, x1] += g * (1.0 - ty) * tx
                    gx[b, ch, y1, x0] += g * ty * (1.0 - tx)
                    gx[b, ch, y1, x1] += g * ty * tx
    return gx_arr
