"""Structured differentiable ops: convolution, pooling, norms, interpolation.

Convolution uses im2col + one BLAS matmul per batch; pooling gathers
window columns and routes gradients to the argmax (first occurrence in
row-major window order on ties).  Both spatial resizing and channel
interpolation share the same 1-D align-corners kernel, which is also
exposed on plain numpy arrays for non-differentiable callers.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, make_op

__all__ = [
    "conv2d",
    "maxpool2",
    "max_pool2d",
    "batch_norm",
    "layer_norm",
    "resize_bilinear",
    "channel_interp",
    "sigmoid",
    "log_sigmoid",
    "smooth_l1",
    "interp_weights",
    "interp_axis",
]


# ---------------------------------------------------------------------------
# align-corners linear interpolation (shared by resize / channel transform)

def interp_weights(n_in: int, n_out: int):
    """Source indices (lo, hi) and hi-weight for align-corners 1-D resampling.

    Output sample i reads source position i*(n_in-1)/(n_out-1); a single
    output sample degenerates to source position 0.
    """
    if n_out < 1:
        raise ShapeError(f"interpolation target must be >= 1, got {n_out}")
    if n_out == 1:
        src = np.zeros(1)
    else:
        src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    w_hi = src - lo
    return lo, hi, w_hi


def interp_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    """Align-corners linear resampling of one axis of a plain array."""
    n_in = arr.shape[axis]
    if n_out == n_in:
        return arr
    lo, hi, w_hi = interp_weights(n_in, n_out)
    a = np.moveaxis(arr, axis, 0)
    w = w_hi.reshape((n_out,) + (1,) * (arr.ndim - 1))
    out = a[lo] * (1.0 - w) + a[hi] * w
    return np.moveaxis(out, 0, axis)


def _interp_axis_backward(g: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    """Transpose of interp_axis: scatter-add output grads to source slots."""
    n_out = g.shape[axis]
    lo, hi, w_hi = interp_weights(n_in, n_out)
    gm = np.moveaxis(g, axis, 0)
    w = w_hi.reshape((n_out,) + (1,) * (g.ndim - 1))
    shape = (n_in,) + gm.shape[1:]
    acc = np.zeros(shape, dtype=np.float64)
    np.add.at(acc, lo, gm * (1.0 - w))
    np.add.at(acc, hi, gm * w)
    return np.moveaxis(acc, 0, axis)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize; identity sizes pass data through bitwise."""
    b, c, h, w = x.shape
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be >= 1, got ({out_h}, {out_w})")
    data = x.data
    if out_h != h:
        data = interp_axis(data, 2, out_h)
    if out_w != w:
        data = interp_axis(data, 3, out_w)
    if data is x.data:
        data = data.copy()

    def _bwd(g):
        if out_w != w:
            g = _interp_axis_backward(g, 3, w)
        if out_h != h:
            g = _interp_axis_backward(g, 2, h)
        x.accumulate_grad(g if g.base is None else g.copy())

    return make_op(data, (x,), _bwd)


def channel_interp(x: Tensor, out_channels: int) -> Tensor:
    """Linearly resample the channel axis (align-corners) to ``out_channels``.

    Identity widths pass data through bitwise.
    """
    c = x.shape[1]
    out_channels = int(out_channels)
    if out_channels < 1:
        raise ShapeError(f"channel_interp target must be >= 1, got {out_channels}")
    if out_channels == c:
        data = x.data.copy()

        def _bwd_id(g):
            x.accumulate_grad(g.copy())

        return make_op(data, (x,), _bwd_id)

    data = interp_axis(x.data, 1, out_channels)

    def _bwd(g):
        x.accumulate_grad(_interp_axis_backward(g, 1, c))

    return make_op(data, (x,), _bwd)


# ---------------------------------------------------------------------------
# convolution

def _conv_out_dim(size: int, k_eff: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k_eff) // stride + 1


def _gather_cols(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=np.float64)
    for ki in range(k):
        i0 = ki * dilation
        for kj in range(k):
            j0 = kj * dilation
            cols[:, :, ki, kj] = xp[:, :, i0 : i0 + stride * ho : stride, j0 : j0 + stride * wo : stride]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D convolution with square kernels; differentiable in x, weight, bias."""
    b, c_in, h, w = x.shape
    c_out, c_w, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernels are square; got {weight.shape}")
    if c_w != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c_in}, weight expects {c_w}")
    if bias is not None and bias.shape != (1, c_out, 1, 1):
        raise ShapeError(f"conv2d bias must be (1, {c_out}, 1, 1); got {bias.shape}")
    k_eff = kh + (kh - 1) * (dilation - 1)
    ho = _conv_out_dim(h, k_eff, stride, padding)
    wo = _conv_out_dim(w, k_eff, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output dims ({ho}, {wo}) not positive for input {h}x{w}, "
            f"kernel {kh}, stride {stride}, padding {padding}, dilation {dilation}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _gather_cols(xp, kh, stride, dilation, ho, wo)
    cols_mat = cols.reshape(b, c_in * kh * kw, ho * wo)
    w_mat = weight.data.reshape(c_out, c_in * kh * kw)
    out = np.matmul(w_mat, cols_mat).reshape(b, c_out, ho, wo)
    if bias is not None:
        out += bias.data

    def _bwd(g):
        g_mat = g.reshape(b, c_out, ho * wo)
        if weight.requires_grad:
            gw = np.matmul(g_mat, cols_mat.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1))
        if x.requires_grad:
            g_cols = np.matmul(w_mat.T, g_mat).reshape(b, c_in, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                i0 = ki * dilation
                for kj in range(kw):
                    j0 = kj * dilation
                    gxp[:, :, i0 : i0 + stride * ho : stride, j0 : j0 + stride * wo : stride] += g_cols[:, :, ki, kj]
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            x.accumulate_grad(np.ascontiguousarray(gxp))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, _bwd)


# ---------------------------------------------------------------------------
# pooling

def maxpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool; ties route the gradient to the first
    (row-major) element of the window."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x.data.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _bwd(g):
        gwin = np.zeros((b, c, ho, wo, 4), dtype=np.float64)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        x.accumulate_grad(np.ascontiguousarray(gx))

    return make_op(np.ascontiguousarray(out), (x,), _bwd)


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """General max pool (used by the backbone stem's 3x3/2 pool); padding
    cells hold -inf and can never win the argmax."""
    b, c, h, w = x.shape
    ho = _conv_out_dim(h, kernel, stride, padding)
    wo = _conv_out_dim(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d output dims ({ho}, {wo}) not positive")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    cols = _gather_cols(xp, kernel, stride, 1, ho, wo).reshape(b, c, kernel * kernel, ho, wo)
    idx = cols.argmax(axis=2)
    out = np.take_along_axis(cols, idx[:, :, None], axis=2)[:, :, 0]

    def _bwd(g):
        gcols = np.zeros_like(cols)
        np.put_along_axis(gcols, idx[:, :, None], g[:, :, None], axis=2)
        gcols = gcols.reshape(b, c, kernel, kernel, ho, wo)
        gxp = np.zeros(xp.shape, dtype=np.float64)
        for ki in range(kernel):
            for kj in range(kernel):
                gxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += gcols[:, :, ki, kj]
        if padding:
            gxp = gxp[:, :, padding : padding + h, padding : padding + w]
        x.accumulate_grad(np.ascontiguousarray(gxp))

    return make_op(np.ascontiguousarray(out), (x,), _bwd)


# ---------------------------------------------------------------------------
# normalization

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over (batch, H, W) with population variance.

    Train mode normalizes by batch statistics and folds them into the
    running buffers (in place); eval mode normalizes by the buffers.
    """
    b, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ShapeError(f"batch_norm gamma/beta must be (1, {c}, 1, 1)")
    if training:
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(running_mean.shape)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(running_var.shape)
    else:
        mean = running_mean.reshape(1, c, 1, 1)
        var = running_var.reshape(1, c, 1, 1)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def _bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3), keepdims=True))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3), keepdims=True))
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                n = b * h * w
                s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv_std / n) * (n * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std
            x.accumulate_grad(gx)

    return make_op(out, (x, gamma, beta), _bwd)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize across channels at each (b, y, x) position to zero mean and
    unit population variance, then apply per-channel scale and shift."""
    b, c, h, w = x.shape
    if scale.shape != (1, c, 1, 1) or shift.shape != (1, c, 1, 1):
        raise ShapeError(f"layer_norm scale/shift must be (1, {c}, 1, 1)")
    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = scale.data * xhat + shift.data

    def _bwd(g):
        if scale.requires_grad:
            scale.accumulate_grad((g * xhat).sum(axis=(0, 2, 3), keepdims=True))
        if shift.requires_grad:
            shift.accumulate_grad(g.sum(axis=(0, 2, 3), keepdims=True))
        if x.requires_grad:
            gxhat = g * scale.data
            s1 = gxhat.sum(axis=1, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=1, keepdims=True)
            gx = (inv_std / c) * (c * gxhat - s1 - xhat * s2)
            x.accumulate_grad(gx)

    return make_op(out, (x, scale, shift), _bwd)


# ---------------------------------------------------------------------------
# pointwise nonlinearities for the detection loss

def sigmoid(x: Tensor) -> Tensor:
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    s[~pos] = ex / (1.0 + ex)

    def _bwd(g):
        x.accumulate_grad(g * s * (1.0 - s))

    return make_op(s, (x,), _bwd)


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)), stable for logits of either sign."""
    out = np.where(x.data >= 0, -np.log1p(np.exp(-np.abs(x.data))),
                   x.data - np.log1p(np.exp(-np.abs(x.data))))

    def _bwd(g):
        # d/dx log sigmoid(x) = sigmoid(-x)
        sneg = np.empty_like(x.data)
        pos = x.data >= 0
        sneg[pos] = np.exp(-x.data[pos]) / (1.0 + np.exp(-x.data[pos]))
        sneg[~pos] = 1.0 / (1.0 + np.exp(x.data[~pos]))
        x.accumulate_grad(g * sneg)

    return make_op(out, (x,), _bwd)


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise Huber: 0.5*x^2 inside |x| < 1, |x| - 0.5 outside."""
    a = np.abs(x.data)
    inner = a < 1.0
    out = np.where(inner, 0.5 * x.data * x.data, a - 0.5)

    def _bwd(g):
        x.accumulate_grad(g * np.where(inner, x.data, np.sign(x.data)))

    return make_op(out, (x,), _bwd)
