"""Differentiable primitives.

Each function takes :class:`Tensor` (or array-like) inputs, computes the
forward result with numpy and registers a closure for the backward pass.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DimensionError
from .tensor import Tensor

__all__ = [
    "add", "sub", "mul", "div", "neg", "matmul", "linear", "sum", "mean",
    "reshape", "transpose", "index", "concat", "stack", "exp", "log", "clamp",
    "relu", "sigmoid", "softmax", "log_softmax", "conv2d", "maxpool2d",
    "depthwise_xcorr", "grad_reverse", "binary_cross_entropy", "smooth_l1",
    "bilinear_sample",
]


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=dtype) if dtype is not None else Tensor(x).data
    t.requires_grad = False
    t.grad = None
    t.name = None
    t._parents = ()
    t._backward = None
    t.op = "const"
    return t


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return Tensor._from_op(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; the gradient is zero wherever clipping was active."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return Tensor._from_op(out, (a,), lambda g: (g * inside,), "clamp")


# -- linear algebra and shape ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected layer: ``x @ weight.T + bias`` with weight of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._from_op(out, parents, backward, "linear")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.dtype.type(1.0 / count)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.asarray(a.data[idx]), (a,), backward, "index")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, sizes, axis=axis)

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


# -- activations ----------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0, -x)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), backward, "log_softmax")


# -- convolutional ops ----------------------------------------------------

def _out_extent(size: int, k: int, stride: int, what: str) -> int:
    if k > size:
        raise DimensionError(f"{what}: kernel extent {k} exceeds padded input extent {size}")
    if (size - k) % stride:
        raise ConfigurationError(
            f"{what}: ({size} - {k}) is not divisible by stride {stride}; output size would be truncated"
        )
    return (size - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation of an NCHW input with an FCkk kernel.

    Raises ConfigurationError instead of silently truncating when the padded
    extent minus the kernel is not a multiple of the stride.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: invalid stride {stride} / padding {padding}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if c != ck:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ck}")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = _out_extent(hp, kh, stride, "conv2d")
    wo = _out_extent(wp, kw, stride, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dk = (g2.T @ cols).reshape(kernel.shape)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._from_op(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    ho = _out_extent(h, kernel, stride, "maxpool2d")
    wo = _out_extent(w, kernel, stride, "maxpool2d")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        for k in range(kernel * kernel):
            i, j = divmod(k, kernel)
            dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * (arg == k)
        return (dx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def depthwise_xcorr(search: Tensor, template: Tensor) -> Tensor:
    """Per-channel valid cross-correlation, template channel ``c`` used as the kernel for search channel ``c``."""
    if search.ndim != 4 or template.ndim != 4:
        raise DimensionError("depthwise_xcorr expects NCHW tensors")
    n, c, hs, ws = search.shape
    nt, ct, ht, wt = template.shape
    if (n, c) != (nt, ct):
        raise DimensionError(f"depthwise_xcorr: search {search.shape} and template {template.shape} disagree on N,C")
    if ht > hs or wt > ws:
        raise DimensionError(f"depthwise_xcorr: template {ht}x{wt} larger than search {hs}x{ws}")
    ho, wo = hs - ht + 1, ws - wt + 1
    win = sliding_window_view(search.data, (ht, wt), axis=(2, 3))
    out = np.einsum("ncijhw,nchw->ncij", win, template.data, optimize=True)

    def backward(g):
        dt = np.einsum("ncijhw,ncij->nchw", win, g, optimize=True) if template.requires_grad else None
        ds = None
        if search.requires_grad:
            ds = np.zeros_like(search.data)
            if ht * wt <= ho * wo:
                for a in range(ht):
                    for b in range(wt):
                        ds[:, :, a:a + ho, b:b + wo] += g * template.data[:, :, a:a + 1, b:b + 1]
            else:
                for i in range(ho):
                    for j in range(wo):
                        ds[:, :, i:i + ht, j:j + wt] += g[:, :, i:i + 1, j:j + 1] * template.data
        return ds, dt

    return Tensor._from_op(out, (search, template), backward, "depthwise_xcorr")


def grad_reverse(x: Tensor, lambda_grl: float = 1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lambda_grl`` on the way back."""
    if lambda_grl < 0:
        raise ConfigurationError(f"lambda_grl must be non-negative, got {lambda_grl}")

    def backward(g):
        if lambda_grl == 0:
            return (np.zeros_like(g),)
        return (g * g.dtype.type(-lambda_grl),)

    return Tensor._from_op(x.data, (x,), backward, "grad_reverse")


# -- losses ---------------------------------------------------------------

def binary_cross_entropy(p: Tensor, target, eps: float = 1e-6, weight=None, reduction: str = "mean") -> Tensor:
    """BCE on probabilities clamped to ``[eps, 1 - eps]`` (zero gradient where clamped).

    ``weight`` is an optional elementwise multiplier; with ``reduction="mean"``
    the weighted sum is divided by the element count.
    """
    t = np.broadcast_to(np.asarray(target, dtype=p.data.dtype), p.shape)
    pc = np.clip(p.data, eps, 1 - eps)
    inside = (p.data >= eps) & (p.data <= 1 - eps)
    elem = -(t * np.log(pc) + (1 - t) * np.log(1 - pc))
    wt = None if weight is None else np.broadcast_to(np.asarray(weight, dtype=p.data.dtype), p.shape)
    if wt is not None:
        elem = elem * wt
    dlocal = -(t / pc - (1 - t) / (1 - pc)) * inside
    if wt is not None:
        dlocal = dlocal * wt
    if reduction == "none":
        return Tensor._from_op(elem, (p,), lambda g: (g * dlocal,), "bce")
    scale = 1.0 / p.data.size if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ConfigurationError(f"unknown reduction {reduction!r}")
    out = np.asarray(elem.sum() * scale, dtype=p.data.dtype)
    return Tensor._from_op(out, (p,), lambda g: (g * dlocal * p.data.dtype.type(scale),), "bce")


def smooth_l1(x: Tensor, target, beta: float = 1.0, reduction: str = "mean") -> Tensor:
    t = np.asarray(target, dtype=x.data.dtype)
    d = x.data - t
    ad = np.abs(d)
    small = ad < beta
    elem = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    dlocal = np.where(small, d / beta, np.sign(d))
    if reduction == "none":
        return Tensor._from_op(elem, (x,), lambda g: (g * dlocal,), "smooth_l1")
    if reduction not in ("mean", "sum"):
        raise ConfigurationError(f"unknown reduction {reduction!r}")
    scale = x.data.dtype.type(1.0 / x.data.size if reduction == "mean" else 1.0)
    out = np.asarray(elem.sum() * scale, dtype=x.data.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * dlocal * scale,), "smooth_l1")


# -- sampling -------------------------------------------------------------

def bilinear_sample(feature: Tensor, ys, xs) -> Tensor:
    """Sample a CHW feature map at continuous (y, x) points, returning (C, P).

    Points more than one cell outside the map read as zero; points within
    that margin are clamped to the border. Coordinates are constants, so only
    the four neighbouring cells of each sample receive gradient.
    """
    if feature.ndim != 3:
        raise DimensionError(f"bilinear_sample expects a CHW map, got {feature.shape}")
    c, h, w = feature.shape
    y = np.asarray(ys, dtype=np.float64).reshape(-1)
    x = np.asarray(xs, dtype=np.float64).reshape(-1)
    if y.shape != x.shape:
        raise DimensionError("bilinear_sample: ys and xs differ in length")
    valid = ~((y < -1.0) | (y > h) | (x < -1.0) | (x > w))
    y = np.maximum(y, 0.0)
    x = np.maximum(x, 0.0)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    top = y0 >= h - 1
    y0[top] = h - 1
    y[top] = h - 1
    left = x0 >= w - 1
    x0[left] = w - 1
    x[left] = w - 1
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ly, lx = y - y0, x - x0
    hy, hx = 1.0 - ly, 1.0 - lx
    dt = feature.data.dtype
    weights = [(hy * hx) * valid, (hy * lx) * valid, (ly * hx) * valid, (ly * lx) * valid]
    weights = [wgt.astype(dt) for wgt in weights]
    flat_idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1]
    fmap = feature.data.reshape(c, h * w)
    out = np.zeros((c, y.size), dtype=dt)
    for idx, wgt in zip(flat_idx, weights):
        out += fmap[:, idx] * wgt

    def backward(g):
        grad = np.zeros((c, h * w), dtype=dt)
        for idx, wgt in zip(flat_idx, weights):
            np.add.at(grad, (slice(None), idx), g * wgt)
        return (grad.reshape(c, h, w),)

    return Tensor._from_op(out, (feature,), backward, "bilinear_sample")
