"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects and records a node
when any input requires gradient. Image features use NCHW layout.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dfdnet.autodiff.tensor import Tensor, as_tensor, make_result
from dfdnet.errors import ContractError, DimensionError

PAD_MODES = ("zero", "reflect", "replicate")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, f"shapes {a.shape} and {b.shape} are not compatible") from None


# -- pointwise arithmetic ------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_result(ad * bd, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, "div", (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(x.data * x.dtype.type(c), "scale", (x,), lambda g: (g * c,))


def elementwise(a: Tensor, b, kind: str) -> Tensor:
    """Strict pointwise op: ``b`` must have ``a``'s exact shape or be a scalar.

    ``kind`` is one of ``add``, ``sub``, ``mul`` or ``scale`` (``b`` scalar).
    """
    if kind == "scale":
        if isinstance(b, Tensor):
            raise ContractError("elementwise(kind='scale') takes a python scalar")
        return scale(a, b)
    if isinstance(b, Tensor) and b.shape != a.shape and b.size != 1:
        axes = [i for i, (m, n) in enumerate(zip(a.shape, b.shape)) if m != n]
        detail = f"shapes {a.shape} vs {b.shape}"
        if len(a.shape) == len(b.shape):
            detail += f" differ on axes {axes}"
        raise DimensionError(f"elementwise[{kind}]", detail)
    fn = {"add": add, "sub": sub, "mul": mul}.get(kind)
    if fn is None:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return fn(a, b)


def absolute(x: Tensor) -> Tensor:
    # subgradient of |x| at 0 is 0 (np.sign(0) == 0)
    xd = x.data
    return make_result(np.abs(xd), "abs", (x,), lambda g: (g * np.sign(xd),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(xd * xd, "square", (x,), lambda g: (2.0 * g * xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_result(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def softmax_groups(x: Tensor, axis: int = 1) -> Tensor:
    """Softmax along the group axis ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, "softmax", (x,), vjp)


# -- shape manipulation ----------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", f"cannot view {old} as {tuple(shape)}") from None
    return make_result(out, "reshape", (x,), lambda g: (g.reshape(old),))


def index(x: Tensor, key) -> Tensor:
    """Basic (slice) indexing; the gradient is scattered back into a zero buffer."""
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] += g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[key]), "index", (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(m != n for i, (m, n) in enumerate(zip(ref, other)) if i != axis % len(ref)):
            raise DimensionError("concat", f"shapes {tuple(ref)} and {t.shape} differ off axis {axis}")
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise DimensionError("stack", f"shapes {tensors[0].shape} and {t.shape} differ")

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_result(np.stack([t.data for t in tensors], axis=axis), "stack", tensors, vjp)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.ascontiguousarray(out), "sum_axis", (x,), vjp)


def reduce(x: Tensor, kind: str = "mean") -> Tensor:
    """Scalar reduction: ``mean``, ``mean_abs`` (mean |x|) or ``mean_sq`` (mean x^2)."""
    if x.size == 0:
        raise DimensionError("reduce", "empty tensor has no mean")
    n = x.size
    shape, dtype = x.shape, x.dtype
    xd = x.data
    if kind == "mean":
        val = xd.mean(dtype=np.float64)
        vjp = lambda g: (np.full(shape, g / n, dtype=dtype),)  # noqa: E731
    elif kind == "mean_abs":
        val = np.abs(xd).mean(dtype=np.float64)
        vjp = lambda g: (np.sign(xd) * (g / n),)  # noqa: E731
    elif kind == "mean_sq":
        val = np.square(xd).mean(dtype=np.float64)
        vjp = lambda g: (xd * (2.0 * g / n),)  # noqa: E731
    else:
        raise ContractError(f"unknown reduction {kind!r}")
    return make_result(np.asarray(val, dtype=dtype), kind, (x,), vjp)


def mean(x: Tensor) -> Tensor:
    return reduce(x, "mean")


# -- padding and convolution -----------------------------------------------------

def _pad_index(n: int, p: int, mode: str) -> np.ndarray:
    idx = np.arange(-p, n + p)
    if mode == "replicate":
        return np.clip(idx, 0, n - 1)
    if mode == "reflect":
        if p >= n:
            raise ContractError(f"reflect padding {p} needs size > {p}, got {n}")
        idx = np.abs(idx)
        return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
    raise ContractError(f"unknown pad mode {mode!r}")


def _fold_axis(g: np.ndarray, axis: int, n: int, p: int, mode: str) -> np.ndarray:
    """Adjoint of index-based padding along one axis."""
    if p == 0:
        return g
    core = [slice(None)] * g.ndim
    core[axis] = slice(p, p + n)
    out = g[tuple(core)].copy()
    if mode == "zero":
        return out
    src = _pad_index(n, p, mode)
    for k in list(range(p)) + list(range(p + n, n + 2 * p)):
        s_from = [slice(None)] * g.ndim
        s_to = [slice(None)] * g.ndim
        s_from[axis] = k
        s_to[axis] = int(src[k])
        out[tuple(s_to)] += g[tuple(s_from)]
    return out


def pad2d(x: Tensor, ph: int, pw: int, mode: str = "zero") -> Tensor:
    """Pad the last two axes by ``ph`` rows and ``pw`` columns on each side."""
    if mode not in PAD_MODES:
        raise ContractError(f"pad mode must be one of {PAD_MODES}, got {mode!r}")
    if ph == 0 and pw == 0:
        return x
    h, w = x.shape[-2:]
    if mode == "zero":
        width = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
        out = np.pad(x.data, width)
    else:
        out = x.data[..., _pad_index(h, ph, mode), :][..., _pad_index(w, pw, mode)]

    def vjp(g):
        g = _fold_axis(g, g.ndim - 2, h, ph, mode)
        return (_fold_axis(g, g.ndim - 1, w, pw, mode),)

    return make_result(np.ascontiguousarray(out), f"pad_{mode}", (x,), vjp)


def _as_pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding=0, pad_mode: str = "zero") -> Tensor:
    """2D cross-correlation of an NCHW input with an OIkk kernel.

    ``padding`` is an int, an ``(ph, pw)`` pair, or ``"same"`` (half the kernel
    size on each axis); ``pad_mode`` selects zero, reflect or replicate borders.
    """
    if x.ndim != 4:
        raise DimensionError("conv2d", f"input must be NCHW, got rank {x.ndim}")
    if kernel.ndim != 4:
        raise DimensionError("conv2d", f"kernel must be OIkk, got rank {kernel.ndim}")
    n, c, _, _ = x.shape
    o, i, kh, kw = kernel.shape
    if i != c:
        raise DimensionError("conv2d", f"input channels (axis 1) = {c} but kernel in-channels (axis 1) = {i}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"conv2d: kernel spatial dims must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError("conv2d", f"bias shape {bias.shape} does not match out-channels {o}")
    ph, pw = (kh // 2, kw // 2) if padding == "same" else _as_pair(padding)
    xp = pad2d(x, ph, pw, pad_mode) if (ph or pw) else x
    hp, wp = xp.shape[2:]
    if hp < kh or wp < kw:
        raise DimensionError("conv2d", f"padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    s = int(stride)
    out = _conv_valid(xp, kernel, s)
    if bias is not None:
        out = add(out, reshape(bias, (1, o, 1, 1)))
    return out


def _conv_valid(xp: Tensor, kernel: Tensor, s: int) -> Tensor:
    n, c, hp, wp = xp.shape
    o, _, kh, kw = kernel.shape
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    win = sliding_window_view(xp.data, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    dtype = xp.dtype

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if xp.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gx = np.zeros((n, c, hp, wp), dtype=dtype)
            for a in range(kh):
                for b in range(kw):
                    gx[:, :, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s] += dcols[:, :, a, b]
        return gx, gk

    return make_result(np.ascontiguousarray(out), "conv2d", (xp, kernel), vjp)


def depthwise_filter(x: Tensor, taps: np.ndarray) -> Tensor:
    """Valid separable correlation of every channel with fixed 1D ``taps`` on both axes.

    The taps are constants (not learned); the result is differentiable in ``x``.
    """
    taps = np.asarray(taps, dtype=x.dtype)
    k = taps.size
    h, w = x.shape[-2:]
    if h < k or w < k:
        raise ContractError(f"depthwise_filter: image {h}x{w} smaller than window {k}")
    ho, wo = h - k + 1, w - k + 1
    xd = x.data
    rows = sum(taps[a] * xd[..., a:a + ho, :] for a in range(k))
    out = sum(taps[b] * rows[..., :, b:b + wo] for b in range(k))

    def vjp(g):
        gr = np.zeros(g.shape[:-1] + (w,), dtype=g.dtype)
        for b in range(k):
            gr[..., :, b:b + wo] += taps[b] * g
        gx = np.zeros(x.shape, dtype=g.dtype)
        for a in range(k):
            gx[..., a:a + ho, :] += taps[a] * gr
        return (gx,)

    return make_result(np.ascontiguousarray(out), "depthwise_filter", (x,), vjp)


# -- normalisation, pooling, dense -------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation of an NCHW tensor.

    In training mode the batch statistics are used and the running buffers are
    updated in place: ``running = momentum * running + (1 - momentum) * batch``
    (the running variance uses the unbiased batch estimate).
    """
    if x.ndim != 4:
        raise DimensionError("batch_norm", f"input must be NCHW, got rank {x.ndim}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("batch_norm", f"channel axis 1 has {c} but params have {gamma.shape}")
    m = n * h * w
    xd = x.data
    if training:
        if m < 2:
            raise ContractError("batch_norm: training mode needs batch*H*W >= 2")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (m / (m - 1))
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gd
        if training:
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return make_result(out.astype(xd.dtype), "batch_norm", (x, gamma, beta), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: NCHW -> NC11."""
    if x.ndim != 4:
        raise DimensionError("global_avg_pool", f"input must be NCHW, got rank {x.ndim}")
    shape = x.shape
    hw = shape[2] * shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make_result(out, "gap", (x,), lambda g: (np.broadcast_to(g / hw, shape).copy(),))


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of an NC tensor with a KxC weight matrix and K bias."""
    if x.ndim != 2:
        raise DimensionError("fully_connected", f"input must be NC, got shape {x.shape}")
    k, c = weights.shape
    if x.shape[1] != c:
        raise DimensionError("fully_connected", f"input axis 1 = {x.shape[1]} but weights axis 1 = {c}")
    xd, wd = x.data, weights.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (k,):
            raise DimensionError("fully_connected", f"bias shape {bias.shape} does not match {k} outputs")
        out = out + bias.data

    def vjp(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return make_result(out, "fc", inputs, lambda g: vjp(g)[: len(inputs)])
