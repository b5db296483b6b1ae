"""Pure-numpy implementations of the hot kernels.

Same call contract as the compiled backend: float64 C-contiguous arrays in,
freshly allocated arrays out.  Convolution inputs arrive already padded; the
autodiff layer owns padding.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride):
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(xp, w, stride, bias=None):
    """Cross-correlate padded input (N,Ci,Hp,Wp) with kernels (Co,Ci,KH,KW).

    Stride 1 runs one GEMM per kernel tap on flattened full planes: shifts
    stay inside each image's flat index range, and the garbage rows from
    windows that wrap the right edge land outside the valid region that is
    sliced off at the end.  No im2col gather is ever materialized.  An
    optional per-output-channel bias seeds the accumulator.
    """
    n, ci, hp, wp = xp.shape
    co, _, kh, kw = w.shape
    if stride != 1:
        win = _windows(xp, kh, kw, stride)
        y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        y = np.ascontiguousarray(np.moveaxis(y, 3, 1))
        if bias is not None:
            y += bias.reshape(1, co, 1, 1)
        return y
    ho, wo = hp - kh + 1, wp - kw + 1
    s = hp * wp
    xf = xp.reshape(n, ci, s)
    if bias is None:
        yf = np.zeros((n, co, s))
    else:
        yf = np.empty((n, co, s))
        yf[:] = bias.reshape(1, co, 1)
    for p in range(kh):
        for q in range(kw):
            off = p * wp + q
            src = xf[:, :, off:] if off else xf
            # einsum streams this skinny product faster than BLAS matmul
            yf[:, :, : s - off] += np.einsum("oc,ncs->nos", w[:, :, p, q], src,
                                             optimize=True)
    if kh == 1 and kw == 1:
        return yf.reshape(n, co, hp, wp)
    return yf.reshape(n, co, hp, wp)[:, :, :ho, :wo].copy()


def _crop(gxp, pad):
    if pad:
        hp, wp = gxp.shape[2], gxp.shape[3]
        return np.ascontiguousarray(gxp[:, :, pad : hp - pad, pad : wp - pad])
    return gxp


def conv2d_backward(xp, w, gy, stride, pad, want_gx=True):
    """Gradients (gx, gw); gx is for the unpadded input, xp is padded.

    Stride 1 embeds the output gradient in a zero-filled full plane; the
    zero margins absorb every tap shift, so the same per-tap flat GEMMs
    apply.  Larger strides fall back to explicit windows.  want_gx False
    skips the input-gradient pass and returns gx as None.
    """
    n, ci, hp, wp = xp.shape
    co, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    if stride != 1:
        win = _windows(xp, kh, kw, stride)
        gw = np.ascontiguousarray(np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3])))
        if not want_gx:
            return None, gw
        hd, wd = (ho - 1) * stride + 1, (wo - 1) * stride + 1
        gd = np.zeros((n, co, hd, wd))
        gd[:, :, ::stride, ::stride] = gy
        gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        wrot = np.ascontiguousarray(w[:, :, ::-1, ::-1])
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        gxp = np.moveaxis(np.tensordot(gwin, wrot, axes=([1, 4, 5], [0, 2, 3])), 3, 1)
        pad_h, pad_w = hp - (hd + kh - 1), wp - (wd + kw - 1)
        if pad_h or pad_w:
            gxp = np.pad(gxp, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
        return _crop(np.ascontiguousarray(gxp), pad), gw

    s = hp * wp
    xf = xp.reshape(n, ci, s)
    if ho == hp and wo == wp:
        ge = gy.reshape(n, co, s)
    else:
        ge = np.zeros((n, co, hp, wp))
        ge[:, :, :ho, :wo] = gy
        ge = ge.reshape(n, co, s)
    gw = np.zeros_like(w)
    if not want_gx:
        for p in range(kh):
            for q in range(kw):
                off = p * wp + q
                m = s - off
                src = xf[:, :, off:] if off else xf
                gw[:, :, p, q] = np.matmul(ge[:, :, :m],
                                           src.transpose(0, 2, 1)).sum(axis=0)
        return None, gw
    gxf = np.zeros((n, ci, s))
    for p in range(kh):
        for q in range(kw):
            off = p * wp + q
            m = s - off
            src = xf[:, :, off:] if off else xf
            gw[:, :, p, q] = np.matmul(ge[:, :, :m], src.transpose(0, 2, 1)).sum(axis=0)
            gxf[:, :, off:] += np.einsum("oc,nos->ncs", w[:, :, p, q], ge[:, :, :m],
                                         optimize=True)
    return _crop(gxf.reshape(n, ci, hp, wp), pad), gw


def maxpool2d_forward(x, kernel, stride):
    """Max pool; returns (pooled, argmax) with argmax flat over H*W.

    Ties resolve to the first maximum in row-major window order, which is
    what np.argmax over the flattened window gives.
    """
    n, c, h, w = x.shape
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    local = flat.argmax(axis=4)
    y = np.take_along_axis(flat, local[..., None], axis=4)[..., 0]
    iy = (np.arange(ho) * stride)[None, None, :, None] + local // kernel
    ix = (np.arange(wo) * stride)[None, None, None, :] + local % kernel
    idx = (iy * w + ix).astype(np.int64)
    return np.ascontiguousarray(y), idx


def maxpool2d_backward(idx, gy, h, w):
    """Scatter output gradients back to the argmax positions."""
    n, c = gy.shape[0], gy.shape[1]
    gx = np.zeros((n, c, h * w))
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(gx, (nn, cc, idx), gy)
    return gx.reshape(n, c, h, w)


_INTERP_CACHE = {}


def _interp_matrix(n_in, n_out):
    """Dense (n_out, n_in) linear-interpolation matrix, half-pixel centers."""
    key = (n_in, n_out)
    m = _INTERP_CACHE.get(key)
    if m is None:
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        t = pos - i0
        m = np.zeros((n_out, n_in))
        rows = np.arange(n_out)
        np.add.at(m, (rows, i0), 1.0 - t)
        np.add.at(m, (rows, i1), t)
        _INTERP_CACHE[key] = m
    return m


def bilinear_forward(x, oh, ow):
    """Bilinear resize of (N,C,H,W) to (N,C,oh,ow), half-pixel alignment."""
    h, w = x.shape[2], x.shape[3]
    my = _interp_matrix(h, oh)
    mx = _interp_matrix(w, ow)
    return np.matmul(np.matmul(my, x), mx.T)


def bilinear_backward(gy, h, w):
    """Gradient of bilinear_forward wrt its input."""
    oh, ow = gy.shape[2], gy.shape[3]
    my = _interp_matrix(h, oh)
    mx = _interp_matrix(w, ow)
    return np.matmul(np.matmul(my.T, gy), mx)


def bn2d_stats(x):
    """Per-channel sum and sum of squares over the N, H, W axes."""
    return (np.einsum("nchw->c", x, optimize=True),
            np.einsum("nchw,nchw->c", x, x, optimize=True))


def bn2d_grad_stats(g, x):
    """Per-channel sums of g and of g*x over the N, H, W axes."""
    return (np.einsum("nchw->c", g, optimize=True),
            np.einsum("nchw,nchw->c", g, x, optimize=True))


def bn2d_apply(x, scale, shift):
    """scale[c] * x + shift[c]."""
    c = x.shape[1]
    y = x * scale.reshape(1, c, 1, 1)
    y += shift.reshape(1, c, 1, 1)
    return y


def bn2d_grad_input(g, x, a, b, c):
    """a[ch]*g + b[ch]*x + c[ch] (batchnorm input gradient)."""
    ch = x.shape[1]
    gx = g * a.reshape(1, ch, 1, 1)
    gx += x * b.reshape(1, ch, 1, 1)
    gx += c.reshape(1, ch, 1, 1)
    return gx


def relu_backward(x, g):
    """g where x > 0 else 0, on flat views."""
    return g * (x > 0)
