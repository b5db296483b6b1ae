"""Reverse-mode automatic differentiation on dense numpy arrays.

Every operation returns a new Tensor and, while gradients are enabled,
records a backward closure plus its parents.  backward() on a scalar loss
replays those closures in exact reverse order of construction, accumulating
into .grad additively so shared subexpressions receive the sum of their
uses.  All values are float64; the hot kernels (conv, pool, resize) are
delegated to the selected backend in fluidseg._kernels.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _K
from .errors import ContractError, DimensionError

_seq_counter = itertools.count()
_grad_enabled = True

# When set, every op validates that its output is fully finite.  Off by
# default because the scan costs as much as some ops; tests and grad_check
# switch it on.
finite_checks = False


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class finite_check_mode:
    """Context manager that toggles per-op finiteness validation."""

    def __init__(self, enabled: bool = True):
        self._enabled = enabled

    def __enter__(self):
        global finite_checks
        self._prev = finite_checks
        finite_checks = self._enabled
        return self

    def __exit__(self, *exc):
        global finite_checks
        finite_checks = self._prev
        return False


class Tensor:
    """Dense float64 array with an accumulated gradient slot.

    grad is None until backward first touches the tensor; None means zero.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq",
                 "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._seq = next(_seq_counter)
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        """Backpropagate from a scalar; errors if already consumed."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar tensor")
        if self._consumed:
            raise RuntimeError("backward() already ran for this graph; rebuild it first")
        self._consumed = True
        self.grad = np.ones_like(self.data)
        nodes = []
        seen = {id(self)}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._backward is not None:
                nodes.append(t)
                for p in t._parents:
                    if id(p) not in seen:
                        seen.add(id(p))
                        stack.append(p)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        for t in nodes:
            t._backward(t.grad)
        for t in nodes:  # break closure cycles so the graph frees promptly
            t._parents = ()
            t._backward = None

    # Operator sugar; the module-level functions are the primary API.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accum(t: Tensor, g):
    if t.requires_grad or t._backward is not None:
        if t.grad is None:
            # copy rather than adopt: callers may hand the same buffer to
            # several parents (e.g. add with equal shapes)
            t.grad = np.array(g)
        else:
            t.grad += g


def _accum_owned(t: Tensor, g):
    """Like _accum for a freshly allocated g that no one else references."""
    if t.requires_grad or t._backward is not None:
        if t.grad is None:
            t.grad = g
        else:
            t.grad += g


def _make(data, parents, backward_fn, op: str) -> Tensor:
    if finite_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    record = _grad_enabled and any(p.requires_grad or p._backward is not None
                                   for p in parents)
    out = Tensor(data, requires_grad=record)
    if record:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bw, "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bw, "scale")


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(np.sum(a.data), (a,), bw, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    return _make(np.mean(a.data), (a,), bw, "mean")


def relu(a: Tensor) -> Tensor:
    def bw(g):
        # derivative at exactly 0 is taken as 0
        g1 = np.ascontiguousarray(g).reshape(-1)
        gx = _K.relu_backward(a.data.reshape(-1), g1)
        _accum_owned(a, np.asarray(gx).reshape(a.data.shape))

    return _make(np.maximum(a.data, 0.0), (a,), bw, "relu")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)

    def bw(g):
        _accum_owned(a, g * y * (1.0 - y))

    return _make(y, (a,), bw, "sigmoid")


def _channel_axis(t: Tensor) -> int:
    if t.data.ndim == 4:
        return 1
    if t.data.ndim == 3:
        return 0
    raise DimensionError(f"expected 3D or 4D tensor, got {t.data.ndim}D")


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax over the channel axis (axis 1 of NCHW, axis 0 of CHW)."""
    ax = _channel_axis(a)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        _accum_owned(a, y * (g - dot))

    return _make(y, (a,), bw, "softmax_channels")


def log_softmax_channels(a: Tensor) -> Tensor:
    """Log-softmax over the channel axis, max-shifted for stability."""
    ax = _channel_axis(a)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        _accum_owned(a, g - soft * g.sum(axis=ax, keepdims=True))

    return _make(out, (a,), bw, "log_softmax_channels")


def avgpool_spatial(a: Tensor) -> Tensor:
    """Global average over H and W, keeping 1x1 spatial dims."""
    if a.data.ndim != 4:
        raise DimensionError("avgpool_spatial expects NCHW")
    n_sp = a.data.shape[2] * a.data.shape[3]
    y = a.data.mean(axis=(2, 3), keepdims=True)

    def bw(g):
        _accum(a, np.broadcast_to(g / n_sp, a.data.shape))

    return _make(y, (a,), bw, "avgpool_spatial")


def concat_channels(tensors) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat_channels needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.data.shape[1] for t in tensors]

    def bw(g):
        start = 0
        for t, c in zip(tensors, sizes):
            _accum(t, g[:, start : start + c])
            start += c

    return _make(data, tuple(tensors), bw, "concat_channels")


def index_select0(a: Tensor, idx) -> Tensor:
    """Gather items along the leading axis; duplicates accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def bw(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        _accum_owned(a, gx)

    return _make(data, (a,), bw, "index_select0")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation, NCHW; output H' = (H + 2p - KH) // s + 1."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects 4D input and 4D weight")
    if x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.data.shape[1]}, weight {w.data.shape[1]}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d needs stride >= 1 and padding >= 0")
    kh, kw = w.data.shape[2], w.data.shape[3]
    hp, wp = x.data.shape[2] + 2 * padding, x.data.shape[3] + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError("conv2d kernel larger than padded input")
    if padding:
        xp = np.zeros((x.data.shape[0], x.data.shape[1], hp, wp))
        xp[:, :, padding : hp - padding, padding : wp - padding] = x.data
    else:
        xp = x.data
    if b is not None and b.data.shape != (w.data.shape[0],):
        raise DimensionError("conv2d bias must have one entry per output channel")
    y = _K.conv2d_forward(xp, w.data, stride, None if b is None else b.data)

    def bw(g):
        g = np.ascontiguousarray(g)
        # the input gradient pass is skipped entirely for graph leaves that
        # do not ask for a gradient (e.g. the image batch at the first layer)
        want_gx = x.requires_grad or x._backward is not None
        gx, gw = _K.conv2d_backward(xp, w.data, g, stride, padding, want_gx)
        if gx is not None:
            _accum_owned(x, gx)
        _accum_owned(w, gw)
        if b is not None:
            _accum_owned(b, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, bw, "conv2d")


def maxpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Max pool with first-maximum (row-major) tie-breaking."""
    if x.data.ndim != 4:
        raise DimensionError("maxpool2d expects NCHW")
    h, w = x.data.shape[2], x.data.shape[3]
    if kernel > h or kernel > w:
        raise DimensionError("maxpool2d kernel larger than input")
    if (h - kernel) % stride or (w - kernel) % stride:
        raise DimensionError("maxpool2d requires windows to tile the input exactly")
    y, idx = _K.maxpool2d_forward(x.data, kernel, stride)

    def bw(g):
        _accum_owned(x, _K.maxpool2d_backward(idx, np.ascontiguousarray(g), h, w))

    return _make(y, (x,), bw, "maxpool2d")


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers, edge-clamped; upsampling only."""
    if x.data.ndim != 4:
        raise DimensionError("bilinear_upsample expects NCHW")
    h, w = x.data.shape[2], x.data.shape[3]
    if out_h < h or out_w < w:
        raise DimensionError("bilinear_upsample cannot shrink the input")
    y = _K.bilinear_forward(x.data, out_h, out_w)

    def bw(g):
        _accum_owned(x, _K.bilinear_backward(np.ascontiguousarray(g), h, w))

    return _make(y, (x,), bw, "bilinear_upsample")


@dataclass
class BatchNormState:
    """Running statistics owned by a batchnorm layer, one entry per channel."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @staticmethod
    def fresh(channels: int) -> "BatchNormState":
        return BatchNormState(np.zeros(channels), np.ones(channels))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy())


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                mode: str, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Channel-wise batch normalization.

    Train mode normalizes with biased batch statistics and folds them into the
    running estimates (the variance estimate stored is unbiased); eval mode
    normalizes with the running statistics and never mutates them.
    """
    if x.data.ndim != 4:
        raise DimensionError("batchnorm2d expects NCHW")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("batchnorm2d gamma/beta must be per-channel vectors")
    if mode not in ("train", "eval"):
        raise ContractError(f"batchnorm2d mode must be train or eval, got {mode!r}")
    xd = x.data
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    if mode == "train":
        # single-pass statistics; xhat is never materialized, the backward
        # reconstructs its reductions from sums over x instead
        sx, sxx = _K.bn2d_stats(xd)
        mean = sx / m
        var = np.maximum(sxx / m - mean * mean, 0.0)  # biased, used below
        inv_std = 1.0 / np.sqrt(var + eps)
        var_update = var * m / (m - 1) if m > 1 else var
        state.running_mean += momentum * (mean - state.running_mean)
        state.running_var += momentum * (var_update - state.running_var)

        def bw(g):
            g = np.ascontiguousarray(g)
            sg, sgx = _K.bn2d_grad_stats(g, xd)
            _accum_owned(beta, sg)
            ggam = inv_std * (sgx - mean * sg)  # equals sum of g * xhat
            _accum(gamma, ggam)
            # dx = a*g + b*x + c with per-channel coefficients, from
            # regrouping the standard batchnorm gradient
            a = inv_std * gamma.data
            bcoef = -(inv_std * inv_std / m) * gamma.data * ggam
            ccoef = -a * sg / m - bcoef * mean
            _accum_owned(x, np.asarray(_K.bn2d_grad_input(g, xd, a, bcoef, ccoef)))

    else:
        mean = state.running_mean
        inv_std = 1.0 / np.sqrt(state.running_var + eps)

        def bw(g):
            g = np.ascontiguousarray(g)
            sg, sgx = _K.bn2d_grad_stats(g, xd)
            _accum_owned(beta, sg)
            _accum_owned(gamma, inv_std * (sgx - mean * sg))
            gscale = gamma.data * inv_std
            _accum_owned(x, np.asarray(_K.bn2d_apply(g, gscale, np.zeros(c))))

    scale = gamma.data * inv_std
    shift = beta.data - mean * scale
    y = np.asarray(_K.bn2d_apply(xd, scale, shift))
    return _make(y, (x, gamma, beta), bw, "batchnorm2d")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits.

    Computed as max(o,0) - o*t + log(1 + exp(-|o|)) so large magnitudes never
    overflow; the gradient is sigmoid(o) - t.  The target is a constant.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    o = logits.data
    if t.shape != o.shape:
        raise DimensionError(f"bce_with_logits target shape {t.shape} != logits {o.shape}")
    val = np.maximum(o, 0.0) - o * t + np.log1p(np.exp(-np.abs(o)))

    def bw(g):
        _accum(logits, g * (_sigmoid(o) - t))

    return _make(val, (logits,), bw, "bce_with_logits")


def grad_check(fn, inputs, eps: float = 1e-5, exclude=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn maps the input Tensors to a scalar Tensor.  exclude, when given, is a
    list aligned with inputs of boolean masks marking elements to skip (for
    kinks such as relu at exactly 0).  Error per element is
    |a - n| / max(1, |a|, |n|).  Non-finite intermediates raise
    FloatingPointError naming the op.
    """
    with finite_check_mode(True):
        for t in inputs:
            t.zero_grad()
        out = fn(*inputs)
        if out.data.size != 1:
            raise ContractError("grad_check requires fn to return a scalar")
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                    for t in inputs]
        worst = 0.0
        with no_grad():
            for k, t in enumerate(inputs):
                flat = t.data.reshape(-1)
                a_flat = analytic[k].reshape(-1)
                skip = None
                if exclude is not None and exclude[k] is not None:
                    skip = np.asarray(exclude[k], dtype=bool).reshape(-1)
                for i in range(flat.size):
                    if skip is not None and skip[i]:
                        continue
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = float(fn(*inputs).data)
                    flat[i] = orig - eps
                    fm = float(fn(*inputs).data)
                    flat[i] = orig
                    num = (fp - fm) / (2.0 * eps)
                    err = abs(a_flat[i] - num) / max(1.0, abs(a_flat[i]), abs(num))
                    if err > worst:
                        worst = err
    return worst


def sgd_momentum_step(params, grads, velocities, lr: float, momentum: float):
    """In-place SGD with classical momentum: v <- m*v + g; p <- p - lr*v."""
    if not (len(params) == len(grads) == len(velocities)):
        raise ContractError("params, grads and velocities must align")
    for p, g, v in zip(params, grads, velocities):
        if g is None:
            g = 0.0
        v *= momentum
        v += g
        p.data -= lr * v
