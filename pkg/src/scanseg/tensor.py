"""Dense tensor primitives: convolutions, normalizations, activations, resampling.

Everything operates on plain numpy arrays in row-major NCHW / NCL layout and is
pure: batch norm returns updated running statistics instead of mutating its
inputs. Shape violations raise :class:`ShapeError` naming the offending
dimension. Tests and oracle comparisons run in float64; float32 is accepted
for benchmark workloads.

A lightweight multiply-add counter can be armed with :class:`op_counter`;
while active, every primitive adds its analytic per-layer cost, which the
benchmark harness uses to fit complexity slopes.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when an input shape breaks an operation's contract."""


# ---------------------------------------------------------------------------
# analytic multiply-add accounting

_COUNTERS: list["op_counter"] = []


class op_counter:
    """Context manager accumulating analytic multiply-add counts."""

    def __init__(self):
        self.macs = 0

    def add(self, n):
        self.macs += int(n)

    def __enter__(self):
        _COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _COUNTERS.remove(self)
        return False


def count_macs(n):
    if _COUNTERS:
        for c in _COUNTERS:
            c.add(n)


# ---------------------------------------------------------------------------
# convolutions

_SLAB_BYTES = 8 << 20  # cap on one im2col buffer; small enough to stay cache-resident


def _row_slabs(batch, ho, wo, cols, itemsize):
    """Output-row ranges keeping each im2col buffer under the byte cap."""
    per_row = batch * wo * cols * itemsize
    rows = max(1, min(ho, _SLAB_BYTES // max(per_row, 1)))
    return [(lo, min(lo + rows, ho)) for lo in range(0, ho, rows)]


def _im2col(xcl, kh, kw, stride, row_lo, row_hi, wo):
    """Patch matrix for output rows [row_lo, row_hi) of a channel-last padded
    input (B, Hp, Wp, C): returns (B*rows*Wo, kh*kw*C), C fastest so each
    patch row is gathered by contiguous copies."""
    batch, _, _, c = xcl.shape
    rows = row_hi - row_lo
    col = np.empty((batch, rows, wo, kh, kw, c), dtype=xcl.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, :, :, i, j, :] = xcl[
                :, i + row_lo * stride:i + (row_hi - 1) * stride + 1:stride,
                j:j + stride * wo:stride, :]
    return col.reshape(batch * rows * wo, kh * kw * c)


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """2D cross-correlation with zero padding.

    Args:
        x: input (B, Cin, H, W)
        w: kernel (Cout, Cin/groups, kh, kw)
        b: optional bias (Cout,)
        stride, padding: ints, applied symmetrically to both spatial axes
        groups: channel groups; Cin and Cout must both be divisible

    Returns:
        (B, Cout, H', W') with H' = floor((H + 2*padding - kh)/stride) + 1.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d (B,C,H,W), got {x.ndim}-d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-d, got {w.ndim}-d")
    batch, cin, h, wdt = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin % groups or cout % groups:
        raise ShapeError(
            f"channels not divisible by groups: Cin={cin}, Cout={cout}, groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"kernel channel dim {cin_g} != Cin/groups = {cin // groups}")
    if h + 2 * padding < kh or wdt + 2 * padding < kw:
        raise ShapeError(
            f"spatial extent ({h}x{wdt}) too small for kernel ({kh}x{kw}) at padding {padding}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} != ({cout},)")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    if groups == 1 or (groups == cin and cout == cin):
        count_macs(batch * cout * ho * wo * cin_g * kh * kw)

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x

    if groups == 1 and kh == 1 and kw == 1 and stride == 1:
        # pointwise conv is a plain channel matmul
        prod = xp.transpose(0, 2, 3, 1).reshape(-1, cin) @ w.reshape(cout, cin).T
        out = prod.reshape(batch, ho, wo, cout).transpose(0, 3, 1, 2).copy()
    elif groups == 1:
        xcl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
        w2d = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(kh * kw * cin, cout)
        out = np.empty((batch, ho, wo, cout), dtype=x.dtype)
        for lo, hi in _row_slabs(batch, ho, wo, cin * kh * kw, x.dtype.itemsize):
            prod = _im2col(xcl, kh, kw, stride, lo, hi, wo) @ w2d
            out[:, lo:hi] = prod.reshape(batch, hi - lo, wo, cout)
        out = out.transpose(0, 3, 1, 2).copy()
    elif groups == cin and cout == cin:
        # depthwise fast path
        out = np.zeros((batch, cout, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                out += w[:, 0, i, j][None, :, None, None] * xs
    else:
        co_g = cout // groups
        out = np.empty((batch, cout, ho, wo), dtype=x.dtype)
        for g in range(groups):
            out[:, g * co_g:(g + 1) * co_g] = conv2d(
                x[:, g * cin_g:(g + 1) * cin_g], w[g * co_g:(g + 1) * co_g],
                None, stride, padding, 1)
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def conv2d_backward(x, w, g, stride=1, padding=0, groups=1, need_bias=False):
    """Gradients of conv2d w.r.t. input, kernel and (optionally) bias."""
    batch, cin, h, wdt = x.shape
    cout, cin_g, kh, kw = w.shape
    _, _, ho, wo = g.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)

    if groups == 1 and kh == 1 and kw == 1 and stride == 1:
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        x2d = xp.transpose(0, 2, 3, 1).reshape(-1, cin)
        gw = (x2d.T @ gm).T.reshape(cout, cin, 1, 1).copy()
        gxp2d = gm @ w.reshape(cout, cin)
        gxp = gxp2d.reshape(batch, ho, wo, cin).transpose(0, 3, 1, 2)
    elif groups == 1:
        xcl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
        gw2d = np.zeros((kh * kw * cin, cout), dtype=w.dtype)
        for lo, hi in _row_slabs(batch, ho, wo, cin * kh * kw, x.dtype.itemsize):
            col = _im2col(xcl, kh, kw, stride, lo, hi, wo)
            gm = np.ascontiguousarray(
                g[:, :, lo:hi].transpose(0, 2, 3, 1)).reshape(-1, cout)
            gw2d += col.T @ gm
        gw = gw2d.reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1).copy()
        if stride == 1 and kh == kw and kh - 1 - padding >= 0:
            # input gradient is a full correlation with the rotated kernel
            w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = conv2d(g, w_rot, stride=1, padding=kh - 1 - padding)
            gb = g.sum(axis=(0, 2, 3)) if need_bias else None
            return gx, gw, gb
        w2d = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(kh * kw * cin, cout)
        gxp_cl = np.zeros_like(xcl)
        for lo, hi in _row_slabs(batch, ho, wo, cin * kh * kw, x.dtype.itemsize):
            gm = np.ascontiguousarray(
                g[:, :, lo:hi].transpose(0, 2, 3, 1)).reshape(-1, cout)
            gcol = (gm @ w2d.T).reshape(batch, hi - lo, wo, kh, kw, cin)
            for i in range(kh):
                for j in range(kw):
                    gxp_cl[:, i + lo * stride:i + (hi - 1) * stride + 1:stride,
                           j:j + stride * wo:stride] += gcol[:, :, :, i, j]
        gxp = gxp_cl.transpose(0, 3, 1, 2)
    elif groups == cin and cout == cin:
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                gw[:, 0, i, j] = (g * xs).sum(axis=(0, 2, 3))
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    w[:, 0, i, j][None, :, None, None] * g)
    else:
        co_g = cout // groups
        for grp in range(groups):
            gx_g, gw_g, _ = conv2d_backward(
                x[:, grp * cin_g:(grp + 1) * cin_g], w[grp * co_g:(grp + 1) * co_g],
                g[:, grp * co_g:(grp + 1) * co_g], stride, padding, 1)
            gxp[:, grp * cin_g:(grp + 1) * cin_g,
                padding:padding + h, padding:padding + wdt] += gx_g
            gw[grp * co_g:(grp + 1) * co_g] = gw_g
        gb = g.sum(axis=(0, 2, 3)) if need_bias else None
        return gxp[:, :, padding:padding + h, padding:padding + wdt], gw, gb

    gx = gxp[:, :, padding:padding + h, padding:padding + wdt] if padding else gxp
    gb = g.sum(axis=(0, 2, 3)) if need_bias else None
    return gx, gw, gb


def conv1d_depthwise(x, k, reverse=False):
    """Causal per-channel 1D convolution: out[t] = sum_i k[c,i] * x[t-i].

    Left-pads with kw-1 zeros so output length equals input length and
    position t depends only on inputs <= t. With reverse=True the sequence is
    flipped, convolved causally, and flipped back (anti-causal).

    Args:
        x: (B, C, L)
        k: (C, kw), tap i multiplies the input lagged by i steps
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d_depthwise input must be 3-d (B,C,L), got {x.ndim}-d")
    if k.ndim != 2 or k.shape[0] != x.shape[1]:
        raise ShapeError(
            f"kernel channels {k.shape} do not match input channels C={x.shape[1]}")
    if reverse:
        return conv1d_depthwise(x[:, :, ::-1], k, reverse=False)[:, :, ::-1].copy()
    batch, c, length = x.shape
    kw = k.shape[1]
    count_macs(batch * c * length * kw)
    xp = np.pad(x, ((0, 0), (0, 0), (kw - 1, 0)))
    out = np.zeros_like(x)
    for i in range(kw):
        out += k[:, i][None, :, None] * xp[:, :, kw - 1 - i:kw - 1 - i + length]
    return out


def conv1d_depthwise_backward(x, k, g):
    """Gradients of the forward (causal) depthwise 1D convolution."""
    batch, c, length = x.shape
    kw = k.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (kw - 1, 0)))
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(k)
    for i in range(kw):
        sl = slice(kw - 1 - i, kw - 1 - i + length)
        gk[:, i] = (g * xp[:, :, sl]).sum(axis=(0, 2))
        gxp[:, :, sl] += k[:, i][None, :, None] * g
    return gxp[:, :, kw - 1:], gk


# ---------------------------------------------------------------------------
# resampling


def _up_last(x):
    # 2x upsample of the last axis, half-pixel centers, borders clamped
    n = x.shape[-1]
    out = np.empty(x.shape[:-1] + (2 * n,), dtype=x.dtype)
    if n == 1:
        out[..., 0] = x[..., 0]
        out[..., 1] = x[..., 0]
        return out
    out[..., 0] = x[..., 0]
    out[..., -1] = x[..., -1]
    np.multiply(x[..., :-1], 0.25, out=out[..., 2::2])
    out[..., 2::2] += 0.75 * x[..., 1:]
    np.multiply(x[..., :-1], 0.75, out=out[..., 1:-1:2])
    out[..., 1:-1:2] += 0.25 * x[..., 1:]
    return out


def _up_rows(x):
    # same on axis -2; row slices stay contiguous
    n = x.shape[-2]
    out = np.empty(x.shape[:-2] + (2 * n,) + x.shape[-1:], dtype=x.dtype)
    if n == 1:
        out[..., 0, :] = x[..., 0, :]
        out[..., 1, :] = x[..., 0, :]
        return out
    out[..., 0, :] = x[..., 0, :]
    out[..., -1, :] = x[..., -1, :]
    np.multiply(x[..., :-1, :], 0.25, out=out[..., 2::2, :])
    out[..., 2::2, :] += 0.75 * x[..., 1:, :]
    np.multiply(x[..., :-1, :], 0.75, out=out[..., 1:-1:2, :])
    out[..., 1:-1:2, :] += 0.25 * x[..., 1:, :]
    return out


def _down_last(g):
    # adjoint of _up_last
    n = g.shape[-1] // 2
    gx = np.zeros(g.shape[:-1] + (n,), dtype=g.dtype)
    if n == 1:
        gx[..., 0] = g.sum(axis=-1)
        return gx
    gx[..., 0] += g[..., 0]
    gx[..., -1] += g[..., -1]
    gx[..., 1:] += 0.75 * g[..., 2::2]
    gx[..., :-1] += 0.25 * g[..., 2::2]
    gx[..., :-1] += 0.75 * g[..., 1:-1:2]
    gx[..., 1:] += 0.25 * g[..., 1:-1:2]
    return gx


def _down_rows(g):
    # adjoint of _up_rows
    n = g.shape[-2] // 2
    gx = np.zeros(g.shape[:-2] + (n,) + g.shape[-1:], dtype=g.dtype)
    if n == 1:
        gx[..., 0, :] = g.sum(axis=-2)
        return gx
    gx[..., 0, :] += g[..., 0, :]
    gx[..., -1, :] += g[..., -1, :]
    gx[..., 1:, :] += 0.75 * g[..., 2::2, :]
    gx[..., :-1, :] += 0.25 * g[..., 2::2, :]
    gx[..., :-1, :] += 0.75 * g[..., 1:-1:2, :]
    gx[..., 1:, :] += 0.25 * g[..., 1:-1:2, :]
    return gx


def bilinear_upsample2x(x):
    """Bilinear 2x upsampling of (B, C, H, W) maps.

    Output pixel i samples input coordinate (i + 0.5)/2 - 0.5, clamped at the
    borders, so constant maps stay constant. The kernel is separable, so the
    two axes are resampled independently.
    """
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample2x input must be 4-d, got {x.ndim}-d")
    count_macs(3 * x.size * 4)
    return _up_rows(_up_last(x))


def bilinear_upsample2x_backward(g):
    return _down_last(_down_rows(g))


# ---------------------------------------------------------------------------
# normalizations


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"affine parameters {gamma.shape}/{beta.shape} do not match channels C={c}")
    count_macs(4 * x.size)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return gamma * xhat + beta


def batch_norm2d(x, running_mean, running_var, gamma, beta,
                 eps=1e-5, momentum=0.1, training=False):
    """Batch normalization over (B, H, W) per channel.

    Training mode normalizes with the biased batch variance and returns
    running statistics updated as (1-momentum)*old + momentum*new, where the
    variance estimate entering the running update is the unbiased one (the
    usual convention). Eval mode applies the running statistics as a fixed
    affine map and returns them unchanged.

    Returns:
        (y, new_running_mean, new_running_var)
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d input must be 4-d, got {x.ndim}-d")
    c = x.shape[1]
    for name, arr in (("running_mean", running_mean), ("running_var", running_var),
                      ("gamma", gamma), ("beta", beta)):
        if arr.shape != (c,):
            raise ShapeError(f"{name} shape {arr.shape} != ({c},)")
    count_macs(2 * x.size)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n == 1:
            raise ShapeError("batch_norm2d training mode needs B*H*W > 1 per channel")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        y = gamma[None, :, None, None] * (
            (x - mu[None, :, None, None]) / np.sqrt(var + eps)[None, :, None, None]
        ) + beta[None, :, None, None]
        unbiased = var * (n / (n - 1))
        new_mean = (1 - momentum) * running_mean + momentum * mu
        new_var = (1 - momentum) * running_var + momentum * unbiased
        return y, new_mean, new_var
    scale = gamma / np.sqrt(running_var + eps)
    shift = beta - running_mean * scale
    return x * scale[None, :, None, None] + shift[None, :, None, None], running_mean, running_var


# ---------------------------------------------------------------------------
# activations


def sigmoid(x):
    # exp only of non-positive values, so no overflow on either branch
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def silu(x):
    count_macs(np.size(x))
    return x * sigmoid(x)


def softplus(x):
    """log(1 + exp(x)) as max(x, 0) + log1p(exp(-|x|)), overflow-free."""
    count_macs(np.size(x))
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def relu(x):
    return np.maximum(x, 0)


_ELEMENTWISE = {"silu": silu, "sigmoid": sigmoid, "softplus": softplus, "relu": relu}


def elementwise(fn, x):
    """Apply one of {silu, sigmoid, softplus, relu} by name."""
    if fn not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise fn {fn!r}, expected one of {sorted(_ELEMENTWISE)}")
    return _ELEMENTWISE[fn](np.asarray(x))


def softmax(x, axis=-1):
    """Max-shifted softmax along one axis."""
    count_macs(3 * np.size(x))
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# linear layers


def dense(x, w, b=None):
    """Token-wise affine map on the last axis: y = x @ w + b.

    x is (..., Din), w is (Din, Dout).
    """
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    count_macs(x.size // x.shape[-1] * w.shape[0] * w.shape[1])
    y = x @ w
    if b is not None:
        y = y + b
    return y
