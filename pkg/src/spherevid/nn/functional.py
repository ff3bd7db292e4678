"""Forward and backward kernels on raw numpy arrays.

Layout is channels-first: 5-D activations are ``B x C x T x H x W`` and
2-D activations are ``B x C``. Every ``*_forward`` returns ``(out, cache)``
and the matching ``*_backward`` consumes that cache.

Convolution is cross-correlation (no kernel flip), lowered to a single
matrix product through an im2col buffer.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ConfigError, ShapeError

_AXES = ("T", "H", "W")


def triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ConfigError(f"expected 3 values, got {v}")
    return v


def out_extents(spatial: Sequence[int], kernel, stride, padding) -> tuple[int, int, int]:
    """``floor((D + 2p - k) / s) + 1`` per axis; raises when any is < 1."""
    out = []
    for axis, d, k, s, p in zip(_AXES, spatial, kernel, stride, padding):
        e = (d + 2 * p - k) // s + 1
        if e < 1:
            raise ShapeError(
                f"non-positive output extent {e} on axis {axis} "
                f"(input {d}, kernel {k}, stride {s}, padding {p})")
        out.append(e)
    return tuple(out)


def _pad(x: np.ndarray, padding, value=0.0) -> np.ndarray:
    pt, ph, pw = padding
    if pt == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)),
                  constant_values=value)


def _window(xp: np.ndarray, offset, stride, extents) -> np.ndarray:
    (dt, dh, dw), (st, sh, sw), (to, ho, wo) = offset, stride, extents
    return xp[:, :, dt:dt + st * (to - 1) + 1:st,
              dh:dh + sh * (ho - 1) + 1:sh,
              dw:dw + sw * (wo - 1) + 1:sw]


def _offsets(kernel):
    kt, kh, kw = kernel
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                yield dt, dh, dw


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _phase_split(x: np.ndarray, stride, padding) -> np.ndarray:
    """Zero-pad and regroup ``x`` as ``C x sT x sH x sW x B x qT x qH x qW``.

    Padded coordinate ``q * s + a`` lands at phase ``a``, cell ``q``, so
    every strided window becomes a contiguous slice.
    """
    bsz, cin, *dims = x.shape
    q = [-(-(d + 2 * p) // s) for d, p, s in zip(dims, padding, stride)]
    buf = np.zeros((bsz, cin, *(qi * si for qi, si in zip(q, stride))), dtype=x.dtype)
    (pt, ph, pw), (T, H, W) = padding, dims
    buf[:, :, pt:pt + T, ph:ph + H, pw:pw + W] = x
    (st, sh, sw) = stride
    buf = buf.reshape(bsz, cin, q[0], st, q[1], sh, q[2], sw)
    return np.ascontiguousarray(buf.transpose(1, 3, 5, 7, 0, 2, 4, 6))


def _im2col(x: np.ndarray, kernel, stride, padding, ext) -> np.ndarray:
    """Rows indexed by ``(c, dt, dh, dw)``, columns by ``(b, t, h, w)``."""
    bsz, cin = x.shape[:2]
    cols = np.empty((cin, *kernel, bsz, *ext), dtype=x.dtype)
    to, ho, wo = ext
    if stride == (1, 1, 1):
        xp = _pad(x, padding).transpose(1, 0, 2, 3, 4)
        for dt, dh, dw in _offsets(kernel):
            cols[:, dt, dh, dw] = xp[:, :, dt:dt + to, dh:dh + ho, dw:dw + wo]
    else:
        xs = _phase_split(x, stride, padding)
        st, sh, sw = stride
        for dt, dh, dw in _offsets(kernel):
            qt, qh, qw = dt // st, dh // sh, dw // sw
            cols[:, dt, dh, dw] = xs[:, dt % st, dh % sh, dw % sw, :,
                                     qt:qt + to, qh:qh + ho, qw:qw + wo]
    return cols.reshape(cin * int(np.prod(kernel)), -1)


# im2col buffers above this many elements are built one batch slice at a time
# so each slice's matmul reads columns that are still in cache
_COLS_BUDGET = 1 << 21


def _batch_chunks(bsz: int, per_item: int) -> list[slice]:
    step = max(1, min(bsz, _COLS_BUDGET // max(per_item, 1)))
    return [slice(s, min(s + step, bsz)) for s in range(0, bsz, step)]


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                   stride=1, padding=0):
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects B x C x T x H x W input, got {x.shape}")
    stride, padding = triple(stride), triple(padding)
    bsz, cin = x.shape[:2]
    cout, wcin, *kernel = w.shape
    if cin != wcin:
        raise ShapeError(f"conv3d: input has {cin} channels, weights expect {wcin}")
    ext = out_extents(x.shape[2:], kernel, stride, padding)
    w2t = w.reshape(cout, -1).T
    out = np.empty((bsz, *ext, cout), dtype=np.result_type(x.dtype, w.dtype))
    chunks = _batch_chunks(bsz, w2t.shape[0] * int(np.prod(ext)))
    cols = []
    for sl in chunks:
        c = _im2col(x[sl], kernel, stride, padding, ext)
        # (P x K) @ (K x O) is markedly faster in BLAS than (O x K) @ (K x P) for small O
        out[sl] = (c.T @ w2t).reshape(-1, *ext, cout)
        cols.append(c)
    if b is not None:
        out += b
    cache = (cols, chunks, x.shape, w, stride, padding, ext, b is not None)
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3)), cache


def conv3d_backward(grad_out: np.ndarray, cache, need_input_grad: bool = True):
    cols, chunks, xshape, w, stride, padding, ext, has_bias = cache
    bsz = xshape[0]
    cout, cin, *kernel = w.shape
    if grad_out.shape != (bsz, cout, *ext):
        raise ShapeError(
            f"conv3d_backward: grad_out dims {grad_out.shape} != forward output {(bsz, cout, *ext)}")
    go_all = grad_out.transpose(0, 2, 3, 4, 1)
    w2 = w.reshape(cout, -1)
    grad_w = np.zeros_like(w2)
    grad_b = np.zeros(cout, dtype=grad_out.dtype) if has_bias else None
    pt, ph, pw = padding
    T, H, W = xshape[2:]
    gxp = None
    if need_input_grad:
        gxp = np.zeros((bsz, cin, T + 2 * pt, H + 2 * ph, W + 2 * pw), dtype=grad_out.dtype)
    for c, sl in zip(cols, chunks):
        go = go_all[sl].reshape(-1, cout)
        grad_w += (c @ go).T
        if has_bias:
            grad_b += go.sum(axis=0)
        if need_input_grad:
            n = sl.stop - sl.start
            gcols = (go @ w2).T.reshape(cin, *kernel, n, *ext)
            gx = gxp[sl]
            for off in _offsets(kernel):
                _window(gx, off, stride, ext)[...] += gcols[:, off[0], off[1], off[2]].transpose(1, 0, 2, 3, 4)
    grad_x = None if gxp is None else gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
    return grad_x, grad_w.reshape(w.shape), grad_b


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def prelu_forward(x: np.ndarray, slope: np.ndarray):
    if x.shape[1] != slope.shape[0]:
        raise ShapeError(f"prelu: {x.shape[1]} channels but {slope.shape[0]} slopes")
    neg = x <= 0
    out = np.where(neg, _channel_view(slope, x.ndim) * x, x)
    return out, (x, neg, slope)


def prelu_backward(grad_out: np.ndarray, cache):
    x, neg, slope = cache
    grad_x = np.where(neg, _channel_view(slope, x.ndim) * grad_out, grad_out)
    axes = (0,) + tuple(range(2, x.ndim))
    grad_slope = np.where(neg, grad_out * x, 0).sum(axis=axes)
    return grad_x, grad_slope.astype(slope.dtype)


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad_out: np.ndarray, mask):
    return grad_out * mask


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      momentum: float, eps: float, training: bool):
    """Normalize per channel over every axis except 1.

    In training mode the running statistics are updated in place (unbiased
    variance, PyTorch convention).
    """
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm: {x.shape[1]} channels but {gamma.shape[0]} parameters")
    axes = (0,) + tuple(range(2, x.ndim))
    if training:
        count = x.size // x.shape[1]
        if count < 2:
            raise ConfigError("batchnorm in train mode needs a population of at least 2 per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _channel_view(mean, x.ndim)) * _channel_view(inv_std, x.ndim)
    out = _channel_view(gamma, x.ndim) * xhat + _channel_view(beta, x.ndim)
    return out.astype(x.dtype, copy=False), (xhat, inv_std, gamma, training)


def batchnorm_backward(grad_out, cache):
    xhat, inv_std, gamma, training = cache
    axes = (0,) + tuple(range(2, xhat.ndim))
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    nd = xhat.ndim
    if not training:
        grad_x = grad_out * _channel_view(gamma * inv_std, nd)
    else:
        count = xhat.size // xhat.shape[1]
        grad_x = _channel_view(gamma * inv_std / count, nd) * (
            count * grad_out
            - _channel_view(grad_beta, nd)
            - xhat * _channel_view(grad_gamma, nd))
    return grad_x.astype(xhat.dtype, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _axis_slice(ndim: int, axis: int, start: int, stop: int, step: int = 1) -> tuple:
    idx = [slice(None)] * ndim
    idx[axis] = slice(start, stop, step)
    return tuple(idx)


def _pool1d_max(x: np.ndarray, axis: int, k: int, s: int, p: int):
    """Max over a 1-D window along ``axis``; ties keep the earliest offset."""
    n = x.shape[axis]
    e = (n + 2 * p - k) // s + 1
    xm = x
    if p:
        pad = [(0, 0)] * x.ndim
        pad[axis] = (p, p)
        xm = np.pad(x, pad, constant_values=-np.inf)
    span = s * (e - 1) + 1
    out = xm[_axis_slice(x.ndim, axis, 0, span, s)].copy()
    arg = np.zeros(out.shape, dtype=np.int8)
    for d in range(1, k):
        v = xm[_axis_slice(x.ndim, axis, d, d + span, s)]
        better = v > out
        arg = np.where(better, np.int8(d), arg)
        np.maximum(out, v, out=out)
    return out, (axis, k, s, p, n, arg)


def _pool1d_max_backward(g: np.ndarray, cache):
    axis, k, s, p, n, arg = cache
    e = g.shape[axis]
    shape = list(g.shape)
    shape[axis] = n + 2 * p
    gx = np.zeros(shape, dtype=g.dtype)
    span = s * (e - 1) + 1
    for d in range(k):
        gx[_axis_slice(g.ndim, axis, d, d + span, s)] += np.where(arg == d, g, 0)
    return gx[_axis_slice(g.ndim, axis, p, p + n)]


def pool3d_forward(x: np.ndarray, kind: str, window, stride=None, padding=0):
    """Max or average pooling over ``T x H x W`` windows.

    Max pooling is separable over the box, so it runs as three 1-D passes
    (W, then H, then T). Average pooling counts padded cells.
    """
    window = triple(window)
    stride = triple(stride if stride is not None else window)
    padding = triple(padding)
    if x.ndim != 5:
        raise ShapeError(f"pool3d expects 5-D input, got {x.shape}")
    ext = out_extents(x.shape[2:], window, stride, padding)
    if kind == "max":
        caches = []
        out = x
        for axis in (4, 3, 2):
            i = axis - 2
            out, c = _pool1d_max(out, axis, window[i], stride[i], padding[i])
            caches.append(c)
        cache = ("max", x.shape, window, stride, padding, ext, caches)
    elif kind == "avg":
        xp = _pad(x, padding)
        out = np.zeros((*x.shape[:2], *ext), dtype=x.dtype)
        for off in _offsets(window):
            out += _window(xp, off, stride, ext)
        out /= np.prod(window)
        cache = ("avg", x.shape, window, stride, padding, ext, None)
    else:
        raise ConfigError(f"unknown pool kind {kind!r}")
    return out, cache


def pool3d_backward(grad_out: np.ndarray, cache):
    kind, xshape, window, stride, padding, ext, extra = cache
    if kind == "max":
        g = grad_out
        for c in reversed(extra):
            g = _pool1d_max_backward(g, c)
        return g
    pt, ph, pw = padding
    T, H, W = xshape[2:]
    gxp = np.zeros((*xshape[:2], T + 2 * pt, H + 2 * ph, W + 2 * pw), dtype=grad_out.dtype)
    scale = 1.0 / np.prod(window)
    for off in _offsets(window):
        _window(gxp, off, stride, ext)[...] += grad_out * scale
    return gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]


def global_avg_pool_forward(x: np.ndarray):
    return x.mean(axis=(2, 3, 4)), x.shape


def global_avg_pool_backward(grad_out: np.ndarray, xshape):
    count = xshape[2] * xshape[3] * xshape[4]
    g = (grad_out / count).reshape(*xshape[:2], 1, 1, 1)
    return np.broadcast_to(g, xshape).copy()


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------

def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    """``x @ w + b`` with ``w`` stored as ``D x K``."""
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weights {w.shape}")
    out = x @ w
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def linear_backward(grad_out: np.ndarray, cache):
    x, w, has_bias = cache
    return grad_out @ w.T, x.T @ grad_out, (grad_out.sum(axis=0) if has_bias else None)
