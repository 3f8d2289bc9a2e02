"""Differentiable kernels used by the segmentation network.

Layout is (batch, channel, height, width). Kernels compute in the dtype of
their inputs, so the same code serves float32 training and float64 checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, NumericError, StatisticsError
from .tensor import Tensor, make_result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor | None, stride: int, pad: int, depthwise: bool):
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv expects 4D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cin, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"kernel must be square with odd side, got {kh}x{kw}")
    if depthwise:
        if Cin != 1 or O != C:
            raise DimensionError(f"depthwise weight must be ({C},1,k,k), got {w.shape}")
    elif Cin != C:
        raise DimensionError(f"weight expects {Cin} input channels, input has {C}")
    if b is not None and b.shape != (O,):
        raise DimensionError(f"bias must have shape ({O},), got {b.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError("stride must be >= 1 and pad >= 0")
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"output size {Ho}x{Wo} is empty")
    if not np.isfinite(x.data).all():
        raise NumericError("conv input contains non-finite values")
    return B, C, H, W, O, kh, Ho, Wo


def _channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum over (batch, h, w) of a*b per channel."""
    B, C = a.shape[:2]
    a3 = np.ascontiguousarray(a).reshape(B, C, 1, -1)
    b3 = np.ascontiguousarray(b).reshape(B, C, -1, 1)
    return np.matmul(a3, b3).sum(axis=0).reshape(C)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _col2im(dcols: np.ndarray, shape, k: int, stride: int, pad: int, Ho: int, Wo: int) -> np.ndarray:
    """Scatter-add patch gradients (B,C,k,k,Ho,Wo) back onto the padded input."""
    B, C, H, W = shape
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=dcols.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u:u + stride * (Ho - 1) + 1:stride, v:v + stride * (Wo - 1) + 1:stride] += dcols[:, :, u, v]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    B, C, H, W, O, k, Ho, Wo = _check_conv_args(x, w, b, stride, pad, depthwise=False)
    xd, wd = x.data, w.data

    if k == 1 and stride == 1 and pad == 0:
        w2 = wd.reshape(O, C)
        xf = xd.reshape(B, C, H * W)
        y = np.matmul(w2, xf)
        if b is not None:
            y += b.data[None, :, None]
        y = y.reshape(B, O, H, W)

        def backward(g):
            gf = g.reshape(B, O, H * W)
            dw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape) if w.requires_grad else None
            dx = np.matmul(w2.T, gf).reshape(xd.shape) if x.requires_grad else None
            db = gf.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
            return dx, dw, db
    else:
        xp = _pad(xd, pad)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        # im2col laid out as (B, C*k*k, Ho*Wo) so the product lands directly in NCHW
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * k * k, Ho * Wo)
        wm = wd.reshape(O, C * k * k)
        y = np.matmul(wm, cols)
        if b is not None:
            y += b.data[None, :, None]
        y = y.reshape(B, O, Ho, Wo)

        def backward(g):
            gf = g.reshape(B, O, Ho * Wo)
            dw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape) if w.requires_grad else None
            db = gf.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
            dx = None
            if x.requires_grad:
                dcols = np.matmul(wm.T, gf).reshape(B, C, k, k, Ho, Wo)
                dx = _col2im(dcols, xd.shape, k, stride, pad, Ho, Wo)
            return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return make_result(y, inputs, backward, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    B, C, H, W, _, k, Ho, Wo = _check_conv_args(x, w, b, stride, pad, depthwise=True)
    xp = _pad(x.data, pad)
    wd = w.data
    span_h, span_w = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1

    def tap(arr, u, v):
        return arr[:, :, u:u + span_h:stride, v:v + span_w:stride]

    y = np.zeros((B, C, Ho, Wo), dtype=np.result_type(xp, wd))
    tmp = np.empty_like(y)
    for u in range(k):
        for v in range(k):
            np.multiply(tap(xp, u, v), wd[:, 0, u, v][None, :, None, None], out=tmp)
            y += tmp
    if b is not None:
        y += b.data[None, :, None, None]

    def backward(g):
        dw = dx = db = None
        if w.requires_grad:
            dw = np.empty_like(wd)
            for u in range(k):
                for v in range(k):
                    dw[:, 0, u, v] = _channel_dot(g, tap(xp, u, v))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            tmp = np.empty_like(g)
            for u in range(k):
                for v in range(k):
                    np.multiply(g, wd[:, 0, u, v][None, :, None, None], out=tmp)
                    tap(dxp, u, v)[...] += tmp
            dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        if b is not None and b.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return make_result(y, inputs, backward, "depthwise_conv2d")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                mode: str = "train", momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In train mode the running statistics arrays are updated in place as
    ``running = momentum * running + (1 - momentum) * batch_stat``.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm expects 4D input, got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"gamma/beta must have shape ({C},)")
    xd = x.data
    g_, b_ = gamma.data, beta.data
    if mode == "train":
        n = B * H * W
        if n < 2:
            raise StatisticsError("batchnorm needs at least 2 values per channel in train mode")
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std[None, :, None, None]
        running_mean *= momentum
        running_mean += (1 - momentum) * mean.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1 - momentum) * var.astype(running_var.dtype)

        def backward(g):
            dgamma = _channel_dot(g, xhat)
            dbeta = g.sum(axis=(0, 2, 3))
            dx = None
            if x.requires_grad:
                dx = (inv_std * g_)[None, :, None, None] * (
                    g - (dbeta / n)[None, :, None, None] - xhat * (dgamma / n)[None, :, None, None])
            return dx, dgamma, dbeta
    elif mode == "infer":
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype)
        xhat = (xd - running_mean.astype(xd.dtype)[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g):
            dx = g * (g_ * inv_std)[None, :, None, None] if x.requires_grad else None
            return dx, _channel_dot(g, xhat), g.sum(axis=(0, 2, 3))
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    y = xhat * g_[None, :, None, None] + b_[None, :, None, None]
    return make_result(y, (x, gamma, beta), backward, "batchnorm2d")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        s = np.exp(-z)
    s += 1
    np.reciprocal(s, out=s)
    # keep strictly inside (0, 1) where exp under/overflows
    lo = np.finfo(s.dtype).tiny
    hi = np.nextafter(s.dtype.type(1), s.dtype.type(0))
    return np.clip(s, lo, hi, out=s)


def activation(x: Tensor, kind: str) -> Tensor:
    xd = x.data
    if kind == "sigmoid":
        y = _sigmoid(xd)

        def backward(g):
            return (g * y * (1 - y),)
    elif kind == "swish":
        s = _sigmoid(xd)
        y = xd * s

        def backward(g):
            return (g * (s + y * (1 - s)),)
    elif kind == "relu":
        y = np.maximum(xd, 0)

        def backward(g):
            return (g * (xd > 0),)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return make_result(y, (x,), backward, kind)


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def swish(x: Tensor) -> Tensor:
    return activation(x, "swish")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4D input, got {x.shape}")
    B, C, H, W = x.shape
    if H * W == 0:
        raise DimensionError("global_avg_pool over an empty spatial extent")
    y = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (H * W), x.shape).copy(),)

    return make_result(y, (x,), backward, "global_avg_pool")


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel centres: out[2i] = .75 a[i] + .25 a[i-1], out[2i+1] = .75 a[i] + .25 a[i+1], edges clamped
    n = a.shape[axis]
    prev = np.take(a, np.r_[0, np.arange(n - 1)], axis=axis)
    nxt = np.take(a, np.r_[np.arange(1, n), n - 1], axis=axis)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _upsample_axis_grad(g: np.ndarray, axis: int) -> np.ndarray:
    n = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis:axis + 1] = [n, 2]
    g2 = g.reshape(shape)
    ge = np.take(g2, 0, axis=axis + 1)
    go = np.take(g2, 1, axis=axis + 1)
    da = 0.75 * (ge + go)
    # even[i] used a[i-1] (a[0] at i=0); odd[i] used a[i+1] (a[n-1] at i=n-1)
    idx = [slice(None)] * g.ndim
    if n > 1:
        idx[axis] = slice(0, n - 1)
        tgt = tuple(idx)
        idx[axis] = slice(1, n)
        src = tuple(idx)
        da[tgt] += 0.25 * ge[src]
        da[src] += 0.25 * go[tgt]
    idx[axis] = slice(0, 1)
    da[tuple(idx)] += 0.25 * ge[tuple(idx)]
    idx[axis] = slice(n - 1, n)
    da[tuple(idx)] += 0.25 * go[tuple(idx)]
    return da


def bilinear_upsample2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"upsample expects 4D input, got {x.shape}")
    y = _upsample_axis(_upsample_axis(x.data, 2), 3).astype(x.dtype, copy=False)

    def backward(g):
        return (_upsample_axis_grad(_upsample_axis_grad(g, 3), 2),)

    return make_result(y, (x,), backward, "bilinear_upsample2x")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects 4D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"cannot concatenate {a.shape} with {b.shape}")
    ca = a.shape[1]
    y = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return make_result(y, (a, b), backward, "concat_channels")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    y = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(y, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    y = a.data * b.data

    def backward(g):
        da = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        db = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return da, db

    return make_result(y, (a, b), backward, "mul")
