"""Differentiable primitives.

Layout conventions: sequences are channels-last, ``(batch, length, channels)``
for 1-D ops and ``(batch, height, width, channels)`` for 2-D ops. Filters are
channels-first, ``(filters, in_channels, *kernel)``. Reductions accumulate in
float64 and cast back to the input dtype.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result

LAYER_NORM_EPS = 1e-5


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return Tensor(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64).astype(grad.dtype)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64).astype(grad.dtype)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands; bare Python numbers take the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.isscalar(b):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.isscalar(a):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent

    def back(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return make_result(out, (a,), back, "power")


def scale(a, factor: float) -> Tensor:
    """Multiply by a Python scalar without promoting the dtype."""
    a = as_tensor(a)
    f = a.data.dtype.type(factor)
    return make_result(a.data * f, (a,), lambda g: (g * f,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(out, (a,), lambda g: (g * inside,), "clip")


# -- activations -------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def swish(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    out = a.data * s

    def back(g):
        return (g * (s + a.data * s * (1 - s)),)

    return make_result(out, (a,), back, "swish")


def glu(a, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of the second half."""
    a = as_tensor(a)
    n = a.shape[axis]
    if n % 2:
        raise ValueError(f"glu needs an even extent on axis {axis}, got {n}")
    x, gate = np.split(a.data, 2, axis=axis)
    s = _sigmoid_np(gate)
    out = x * s

    def back(g):
        return (np.concatenate([g * s, g * x * s * (1 - s)], axis=axis),)

    return make_result(out, (a,), back, "glu")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    p64 = e / e.sum(axis=axis, keepdims=True)
    out = p64.astype(a.dtype)

    def back(g):
        g64 = g.astype(np.float64)
        dot = (g64 * p64).sum(axis=axis, keepdims=True)
        return ((p64 * (g64 - dot)).astype(a.dtype),)

    return make_result(out, (a,), back, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out64 = x - lse
    p64 = np.exp(out64)

    def back(g):
        g64 = g.astype(np.float64)
        return ((g64 - p64 * g64.sum(axis=axis, keepdims=True)).astype(a.dtype),)

    return make_result(out64.astype(a.dtype), (a,), back, "log_softmax")


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out64 = np.squeeze(m + np.log(s), axis=axis)
    w = e / s

    def back(g):
        return ((np.expand_dims(g.astype(np.float64), axis) * w).astype(a.dtype),)

    return make_result(out64.astype(a.dtype), (a,), back, "logsumexp")


# -- reductions and shape ops -------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)).astype(a.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return make_result(out, (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a, start: int = 1) -> Tensor:
    a = as_tensor(a)
    return reshape(a, a.shape[:start] + (-1,))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_result(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(i is Ellipsis or i is None or isinstance(i, (slice, int, np.integer)) for i in idx)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out), (a,), back, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, ts, back, "concat")


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; no gradient flows there."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return make_result(out, (a,), lambda g: (np.where(mask, 0, g).astype(g.dtype),), "masked_fill")


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back into the looked-up rows only."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.shape[0]}): {ids.min()}..{ids.max()}")
    out = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return make_result(out, (table,), back, "embedding")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` with numpy broadcasting over leading axes (both >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                m, p = a.shape[-1], g.shape[-1]
                gb = a.data.reshape(-1, m).T @ g.reshape(-1, p)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(out, (a, b), back, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``(in, out)``."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# -- normalisation -------------------------------------------------------------

def layer_norm(a, gamma=None, beta=None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat64 = xc * inv
    xhat = xhat64.astype(a.dtype)
    n = a.shape[-1]

    def back(g):
        g64 = g.astype(np.float64)
        gx = inv / n * (n * g64 - g64.sum(-1, keepdims=True) - xhat64 * (g64 * xhat64).sum(-1, keepdims=True))
        return (gx.astype(a.dtype),)

    out = make_result(xhat, (a,), back, "layer_norm")
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


# -- convolution and pooling ---------------------------------------------------

def conv_out_len(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


def conv1d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Valid 1-D convolution (cross-correlation).

    x: (B, L, C); weight: (F, C, k); bias: (F,). Returns (B, L_out, F) with
    ``L_out = floor((L - k) / stride) + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError(f"conv1d expects x (B, L, C) and weight (F, C, k); got {x.shape} and {weight.shape}")
    B, L, C = x.shape
    Fo, Cw, k = weight.shape
    if C != Cw:
        raise ValueError(f"conv1d channel mismatch: input {x.shape} has {C} channels, filters {weight.shape} expect {Cw}")
    Lout = conv_out_len(L, k, stride)
    if Lout < 1:
        raise ValueError(f"conv1d produces an empty output: length {L}, kernel {k}, stride {stride}")
    win = sliding_window_view(x.data, k, axis=1)[:, ::stride][:, :Lout]  # (B, Lout, C, k)
    cols = win.reshape(B * Lout, C * k)
    wmat = weight.data.reshape(Fo, C * k)
    out = (cols @ wmat.T).reshape(B, Lout, Fo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def back(g):
        g2 = g.reshape(B * Lout, Fo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.T @ g2).T.reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype)
        if x.requires_grad:
            # one matmul per kernel offset keeps every scatter slice contiguous
            wk = np.ascontiguousarray(weight.data.transpose(2, 0, 1))  # (k, F, C)
            gx = np.zeros_like(x.data)
            stop = stride * (Lout - 1) + 1
            for j in range(k):
                gx[:, j:j + stop:stride] += (g2 @ wk[j]).reshape(B, Lout, C)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return make_result(out, parents, back, "conv1d")


def conv2d(x, weight, bias=None, stride=(1, 1)) -> Tensor:
    """Valid 2-D convolution.

    x: (B, H, W, C); weight: (F, C, kh, kw); bias: (F,). Returns
    (B, H_out, W_out, F).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects x (B, H, W, C) and weight (F, C, kh, kw); got {x.shape} and {weight.shape}")
    B, H, W, C = x.shape
    Fo, Cw, kh, kw = weight.shape
    sh, sw = stride
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} has {C} channels, filters {weight.shape} expect {Cw}")
    Ho, Wo = conv_out_len(H, kh, sh), conv_out_len(W, kw, sw)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d produces an empty output: input {(H, W)}, kernel {(kh, kw)}, stride {stride}")
    win = sliding_window_view(x.data, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :Ho, :Wo]  # (B, Ho, Wo, C, kh, kw)
    cols = win.reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(Fo, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, Fo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def back(g):
        g2 = g.reshape(B * Ho * Wo, Fo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.T @ g2).T.reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype)
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            hstop, wstop = sh * (Ho - 1) + 1, sw * (Wo - 1) + 1
            if sw == kw and Wo * kw == W:
                # windows tile the W axis exactly: one matmul per row offset
                wk = np.ascontiguousarray(weight.data.transpose(2, 0, 3, 1)).reshape(kh, Fo, kw * C)
                gv = gx.reshape(B, H, W * C)
                for i in range(kh):
                    gv[:, i:i + hstop:sh] += (g2 @ wk[i]).reshape(B, Ho, W * C)
            else:
                wk = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))  # (kh, kw, F, C)
                for i in range(kh):
                    for j in range(kw):
                        gx[:, i:i + hstop:sh, j:j + wstop:sw] += (g2 @ wk[i, j]).reshape(B, Ho, Wo, C)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return make_result(out, parents, back, "conv2d")


def depthwise_conv1d(x, weight, bias=None) -> Tensor:
    """Per-channel 1-D convolution with same (zero) padding and stride 1.

    x: (B, L, C); weight: (C, k) with odd k; bias: (C,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    B, L, C = x.shape
    Cw, k = weight.shape
    if C != Cw:
        raise ValueError(f"depthwise_conv1d channel mismatch: input {x.shape}, filters {weight.shape}")
    if k % 2 == 0:
        raise ValueError(f"depthwise_conv1d needs an odd kernel for same padding, got {k}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, k, axis=1)  # (B, L, C, k)
    out = np.einsum("blck,ck->blc", win, weight.data)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def back(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.einsum("blck,blc->ck", win, g)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1), dtype=np.float64).astype(g.dtype)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + L] += g * weight.data[:, j]
            gx = gxp[:, pad:pad + L]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return make_result(out.astype(x.dtype, copy=False), parents, back, "depthwise_conv1d")


def max_pool1d(x, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max pooling over axis 1 of a (B, L, C) tensor; ties route to the first max."""
    x = as_tensor(x)
    B, L, C = x.shape
    Lout = conv_out_len(L, kernel, stride)
    if Lout < 1:
        raise ValueError(f"max_pool1d produces an empty output: length {L}, kernel {kernel}, stride {stride}")
    win = sliding_window_view(x.data, kernel, axis=1)[:, ::stride][:, :Lout]  # (B, Lout, C, k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        stop = stride * (Lout - 1) + 1
        for j in range(kernel):
            gx[:, j:j + stop:stride] += g * (idx == j)
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), back, "max_pool1d")
