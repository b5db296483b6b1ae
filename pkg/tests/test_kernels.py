"""Both kernel backends against brute-force loop oracles and each other."""

import numpy as np
import pytest

from fluidseg._kernels import get_backend, numpy_backend

BACKENDS = [("numpy", numpy_backend)]
if get_backend() == "cython":
    from fluidseg._kernels import _convkernels

    BACKENDS.append(("cython", _convkernels))


def conv_oracle(xp, w, stride, bias=None):
    n, ci, hp, wp = xp.shape
    co, _, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    y = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + kh,
                               j * stride : j * stride + kw]
                    y[b, o, i, j] = np.sum(patch * w[o])
    if bias is not None:
        y += bias.reshape(1, co, 1, 1)
    return y


def conv_grads_oracle(xp, w, gy, stride, pad):
    n, ci, hp, wp = xp.shape
    co, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    g = gy[b, o, i, j]
                    sl = np.s_[b, :, i * stride : i * stride + kh,
                               j * stride : j * stride + kw]
                    gxp[sl] += g * w[o]
                    gw[o] += g * xp[sl]
    if pad:
        gxp = gxp[:, :, pad : hp - pad, pad : wp - pad]
    return np.ascontiguousarray(gxp), gw


@pytest.mark.parametrize("name,impl", BACKENDS)
@pytest.mark.parametrize("kernel", [1, 2, 3, 4, 5])
def test_conv2d_forward_oracle(name, impl, kernel):
    rng = np.random.default_rng(kernel)
    for trial in range(6):
        stride = int(rng.integers(1, 4))
        n, ci, co = rng.integers(1, 4, size=3)
        hp = kernel + stride * int(rng.integers(0, 5))
        wp = kernel + stride * int(rng.integers(0, 5))
        xp = rng.normal(size=(n, ci, hp, wp))
        w = rng.normal(size=(co, ci, kernel, kernel))
        bias = rng.normal(size=co) if trial % 2 else None
        got = np.asarray(impl.conv2d_forward(xp, w, stride, bias))
        want = conv_oracle(xp, w, stride, bias)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("name,impl", BACKENDS)
@pytest.mark.parametrize("kernel,stride,pad", [
    (1, 1, 0), (2, 1, 1), (3, 1, 1), (3, 2, 1), (5, 1, 2), (4, 3, 0), (3, 3, 2),
])
def test_conv2d_backward_oracle(name, impl, kernel, stride, pad):
    rng = np.random.default_rng(kernel * 10 + stride)
    for _ in range(4):
        n, ci, co = rng.integers(1, 4, size=3)
        hp = kernel + stride * int(rng.integers(0, 5)) + 2 * pad
        wp = kernel + stride * int(rng.integers(0, 5)) + 2 * pad
        xp = rng.normal(size=(n, ci, hp, wp))
        w = rng.normal(size=(co, ci, kernel, kernel))
        ho = (hp - kernel) // stride + 1
        wo = (wp - kernel) // stride + 1
        gy = rng.normal(size=(n, co, ho, wo))
        gx, gw = impl.conv2d_backward(xp, w, gy, stride, pad)
        gx_ref, gw_ref = conv_grads_oracle(xp, w, gy, stride, pad)
        np.testing.assert_allclose(np.asarray(gx), gx_ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(np.asarray(gw), gw_ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_conv2d_backward_skips_input_gradient(name, impl):
    rng = np.random.default_rng(7)
    for stride in (1, 2):
        xp = rng.normal(size=(2, 3, 9, 9))
        w = rng.normal(size=(4, 3, 3, 3))
        ho = (9 - 3) // stride + 1
        gy = rng.normal(size=(2, 4, ho, ho))
        gx, gw = impl.conv2d_backward(xp, w, gy, stride, 0, False)
        assert gx is None
        _, gw_ref = conv_grads_oracle(xp, w, gy, stride, 0)
        np.testing.assert_allclose(np.asarray(gw), gw_ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_maxpool2d_oracle(name, impl):
    rng = np.random.default_rng(0)
    for _ in range(10):
        kernel = int(rng.integers(1, 4))
        stride = kernel  # trainer only tiles exactly; keep windows integral
        steps_h, steps_w = rng.integers(1, 5, size=2)
        h = kernel + stride * (int(steps_h) - 1)
        w = kernel + stride * (int(steps_w) - 1)
        x = rng.normal(size=(2, 3, h, w))
        y, idx = impl.maxpool2d_forward(x, kernel, stride)
        y = np.asarray(y)
        for b in range(2):
            for c in range(3):
                for i in range(int(steps_h)):
                    for j in range(int(steps_w)):
                        win = x[b, c, i * stride : i * stride + kernel,
                                j * stride : j * stride + kernel]
                        assert y[b, c, i, j] == win.max()
        g = rng.normal(size=y.shape)
        gx = np.asarray(impl.maxpool2d_backward(np.asarray(idx),
                                                np.ascontiguousarray(g), h, w))
        # each window routes its gradient to exactly one input cell
        assert gx.shape == x.shape
        np.testing.assert_allclose(gx.sum(), g.sum(), atol=1e-12)


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_maxpool2d_tie_takes_first(name, impl):
    x = np.zeros((1, 1, 2, 2))
    _, idx = impl.maxpool2d_forward(x, 2, 2)
    g = np.ones((1, 1, 1, 1))
    gx = np.asarray(impl.maxpool2d_backward(np.asarray(idx), g, 2, 2))
    want = np.zeros((1, 1, 2, 2))
    want[0, 0, 0, 0] = 1.0  # row-major first maximum wins
    np.testing.assert_array_equal(gx, want)


def bilinear_oracle(x, oh, ow):
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow))
    for i in range(oh):
        sy = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(ow):
            sx = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[:, :, i, j] = ((1 - fy) * (1 - fx) * x[:, :, y0, x0]
                               + (1 - fy) * fx * x[:, :, y0, x1]
                               + fy * (1 - fx) * x[:, :, y1, x0]
                               + fy * fx * x[:, :, y1, x1])
    return out


@pytest.mark.parametrize("name,impl", BACKENDS)
@pytest.mark.parametrize("shape,out_hw", [
    ((2, 3, 4, 4), (8, 8)), ((1, 2, 3, 5), (7, 9)), ((2, 1, 5, 5), (5, 5)),
    ((1, 1, 1, 1), (4, 3)),
])
def test_bilinear_oracle(name, impl, shape, out_hw):
    rng = np.random.default_rng(3)
    x = rng.normal(size=shape)
    got = np.asarray(impl.bilinear_forward(x, *out_hw))
    np.testing.assert_allclose(got, bilinear_oracle(x, *out_hw), atol=1e-12)
    # backward is the exact adjoint: <A x, g> == <x, A^T g>
    g = rng.normal(size=got.shape)
    gx = np.asarray(impl.bilinear_backward(np.ascontiguousarray(g),
                                           shape[2], shape[3]))
    lhs = float(np.sum(got * g))
    rhs = float(np.sum(x * gx))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_bn2d_kernels_oracle(name, impl):
    rng = np.random.default_rng(5)
    for _ in range(8):
        n, c, h, w = (int(v) for v in rng.integers(1, 6, size=4))
        x = rng.normal(size=(n, c, h, w))
        g = rng.normal(size=(n, c, h, w))
        sx, sxx = (np.asarray(a) for a in impl.bn2d_stats(x))
        np.testing.assert_allclose(sx, x.sum(axis=(0, 2, 3)), atol=1e-10)
        np.testing.assert_allclose(sxx, (x * x).sum(axis=(0, 2, 3)), atol=1e-10)
        sg, sgx = (np.asarray(a) for a in impl.bn2d_grad_stats(g, x))
        np.testing.assert_allclose(sg, g.sum(axis=(0, 2, 3)), atol=1e-10)
        np.testing.assert_allclose(sgx, (g * x).sum(axis=(0, 2, 3)), atol=1e-10)
        scale = rng.normal(size=c)
        shift = rng.normal(size=c)
        y = np.asarray(impl.bn2d_apply(x, scale, shift))
        np.testing.assert_allclose(
            y, x * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1), atol=1e-12)
        a, b, cc = rng.normal(size=(3, c))
        gi = np.asarray(impl.bn2d_grad_input(g, x, a, b, cc))
        want = (g * a.reshape(1, c, 1, 1) + x * b.reshape(1, c, 1, 1)
                + cc.reshape(1, c, 1, 1))
        np.testing.assert_allclose(gi, want, atol=1e-12)


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_relu_backward_kernel(name, impl):
    rng = np.random.default_rng(9)
    x = rng.normal(size=257)
    g = rng.normal(size=257)
    got = np.asarray(impl.relu_backward(x, g))
    np.testing.assert_array_equal(got, np.where(x > 0, g, 0.0))
    # gradient at exactly zero is defined as zero
    xz = np.zeros(4)
    np.testing.assert_array_equal(np.asarray(impl.relu_backward(xz, np.ones(4))),
                                  np.zeros(4))


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")
def test_backends_agree():
    rng = np.random.default_rng(42)
    cy = dict(BACKENDS)["cython"]
    for kernel in (1, 2, 3, 5):
        for stride in (1, 2):
            xp = rng.normal(size=(2, 3, 11, 13))
            w = rng.normal(size=(4, 3, kernel, kernel))
            bias = rng.normal(size=4)
            ya = np.asarray(numpy_backend.conv2d_forward(xp, w, stride, bias))
            yb = np.asarray(cy.conv2d_forward(xp, w, stride, bias))
            np.testing.assert_allclose(ya, yb, atol=1e-11)
            gy = rng.normal(size=ya.shape)
            for pad in (0, 1):
                gxa, gwa = numpy_backend.conv2d_backward(xp, w, gy, stride, pad)
                gxb, gwb = cy.conv2d_backward(xp, w, gy, stride, pad)
                np.testing.assert_allclose(np.asarray(gxa), np.asarray(gxb), atol=1e-11)
                np.testing.assert_allclose(np.asarray(gwa), np.asarray(gwb), atol=1e-11)
    x = rng.normal(size=(2, 4, 8, 8))
    g = rng.normal(size=(2, 4, 8, 8))
    for fn in ("bn2d_stats",):
        pa = [np.asarray(v) for v in getattr(numpy_backend, fn)(x)]
        pb = [np.asarray(v) for v in getattr(cy, fn)(x)]
        for va, vb in zip(pa, pb):
            np.testing.assert_allclose(va, vb, atol=1e-10)
    ga = numpy_backend.bn2d_grad_stats(g, x)
    gb = cy.bn2d_grad_stats(g, x)
    for va, vb in zip(ga, gb):
        np.testing.assert_allclose(np.asarray(va), np.asarray(vb), atol=1e-10)
