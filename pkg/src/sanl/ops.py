"""Spatial operations on (C, H, W) tensors: convolution, pooling, bilinear resize.

Convolutions run as im2col gathers plus one BLAS matmul; the input gradient
is scattered back with a single bincount. Gather indices and interpolation
matrices are cached per shape, so repeated training steps pay only for the
arithmetic.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, make_op

_COL_CACHE = {}
_POOL_CACHE = {}
_RESIZE_CACHE = {}


def conv_output_size(size, kernel, stride, dilation, padding):
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _col_indices(c_in, h, w, k, stride, dilation, padding):
    """Flat gather indices (c_in*k*k, L) into the zero-padded input."""
    key = (c_in, h, w, k, stride, dilation, padding)
    hit = _COL_CACHE.get(key)
    if hit is not None:
        return hit
    h_out = conv_output_size(h, k, stride, dilation, padding)
    w_out = conv_output_size(w, k, stride, dilation, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    ky = np.repeat(np.arange(k) * dilation, k)
    kx = np.tile(np.arange(k) * dilation, k)
    oy = stride * np.repeat(np.arange(h_out), w_out)
    ox = stride * np.tile(np.arange(w_out), h_out)
    rows = ky[:, None] + oy[None, :]          # (k*k, L)
    cols = kx[:, None] + ox[None, :]
    spatial = rows * wp + cols                # flat within one channel plane
    chan = (np.arange(c_in) * (hp * wp))[:, None, None]
    idx = (spatial[None, :, :] + chan).reshape(c_in * k * k, -1)
    out = (idx, h_out, w_out, hp, wp)
    _COL_CACHE[key] = out
    return out


def conv2d(x, weight, bias, stride=1, dilation=1, padding=0):
    """2-d cross-correlation of a (C_in,H,W) tensor with (C_out,C_in,k,k) weights.

    Kernel size is restricted to 1 or 3. ``bias`` may be None for a
    bias-free projection.
    """
    if x.ndim != 3:
        raise ShapeError("conv2d input must be (C,H,W), got %s" % (x.shape,))
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError("conv2d weight must be (C_out,C_in,k,k), got %s" % (weight.shape,))
    c_out, c_in_w, k, _ = weight.shape
    if k not in (1, 3):
        raise ShapeError("unsupported kernel size %d (only 1x1 and 3x3)" % k)
    c_in, h, w = x.shape
    if c_in_w != c_in:
        raise ShapeError("conv2d channel mismatch: input %s vs weight %s" % (x.shape, weight.shape))
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError("invalid conv2d geometry (stride=%d dilation=%d padding=%d)"
                         % (stride, dilation, padding))
    h_out = conv_output_size(h, k, stride, dilation, padding)
    w_out = conv_output_size(w, k, stride, dilation, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError("conv2d output would be %dx%d for input %s" % (h_out, w_out, x.shape))

    w2 = weight.data.reshape(c_out, -1)
    parents = [x, weight] if bias is None else [x, weight, bias]

    if k == 1 and stride == 1 and padding == 0:
        xf = x.data.reshape(c_in, h * w)
        out = w2 @ xf
        if bias is not None:
            out = out + bias.data[:, None]

        def back(g):
            g2 = g.reshape(c_out, -1)
            dx = (w2.T @ g2).reshape(c_in, h, w) if x.requires_grad else None
            dw = (g2 @ xf.T).reshape(weight.shape) if weight.requires_grad else None
            if bias is None:
                return [dx, dw]
            return [dx, dw, g2.sum(axis=1)]

        return make_op(out.reshape(c_out, h, w), parents, back)

    idx, h_out, w_out, hp, wp = _col_indices(c_in, h, w, k, stride, dilation, padding)
    if padding:
        xp = np.zeros((c_in, hp, wp))
        xp[:, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    cols = xp.reshape(-1)[idx]  # (c_in*k*k, L)
    out = w2 @ cols
    if bias is not None:
        out = out + bias.data[:, None]

    def back(g):
        g2 = g.reshape(c_out, -1)
        dw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = w2.T @ g2
            if stride == 1:
                # columns are shifted views of the padded plane: scatter by
                # accumulating one (C, H_out, W_out) slab per kernel tap
                dxp = np.zeros((c_in, hp, wp))
                slabs = dcols.reshape(c_in, k, k, h_out, w_out)
                for ky in range(k):
                    oy = ky * dilation
                    for kx in range(k):
                        ox = kx * dilation
                        dxp[:, oy:oy + h_out, ox:ox + w_out] += slabs[:, ky, kx]
            else:
                dxp = np.bincount(idx.reshape(-1), weights=dcols.reshape(-1),
                                  minlength=c_in * hp * wp).reshape(c_in, hp, wp)
            dx = dxp[:, padding:padding + h, padding:padding + w] if padding else dxp
        if bias is None:
            return [dx, dw]
        return [dx, dw, g2.sum(axis=1)]

    return make_op(out.reshape(c_out, h_out, w_out), parents, back)


def _pool_indices(h, w, window, stride):
    key = (h, w, window, stride)
    hit = _POOL_CACHE.get(key)
    if hit is not None:
        return hit
    h_out = (h - window) // stride + 1
    w_out = (w - window) // stride + 1
    ky = np.repeat(np.arange(window), window)
    kx = np.tile(np.arange(window), window)
    oy = stride * np.repeat(np.arange(h_out), w_out)
    ox = stride * np.tile(np.arange(w_out), h_out)
    idx = (oy[:, None] + ky[None, :]) * w + (ox[:, None] + kx[None, :])  # (L, window*window)
    out = (idx, h_out, w_out)
    _POOL_CACHE[key] = out
    return out


def pool2d(x, kind, window=None, stride=None):
    """Pooling over a (C,H,W) tensor; kind is "max", "avg" or "global-avg".

    Trailing rows/columns that do not fill a window are dropped (floor
    semantics). Max pooling routes the gradient to the first maximum in
    row-major window order.
    """
    if x.ndim != 3:
        raise ShapeError("pool2d input must be (C,H,W), got %s" % (x.shape,))
    c, h, w = x.shape

    if kind == "global-avg":
        def back(g):
            return [np.broadcast_to(g / (h * w), (c, h, w)).copy()]

        return make_op(x.data.mean(axis=(1, 2), keepdims=True), [x], back)

    if kind not in ("max", "avg"):
        raise ValueError("unknown pooling kind %r" % (kind,))
    if window is None:
        raise ValueError("window required for %s pooling" % kind)
    stride = window if stride is None else stride
    if window > h or window > w:
        raise ShapeError("pool window %d exceeds input %s" % (window, x.shape))

    if kind == "avg" and stride == window and h % window == 0 and w % window == 0:
        ho, wo = h // window, w // window
        out = x.data.reshape(c, ho, window, wo, window).mean(axis=(2, 4))

        def back(g):
            expanded = np.repeat(np.repeat(g, window, axis=1), window, axis=2)
            return [expanded / (window * window)]

        return make_op(out, [x], back)

    idx, h_out, w_out = _pool_indices(h, w, window, stride)
    flat = x.data.reshape(c, h * w)
    windows = flat[:, idx]  # (C, L, window*window)

    if kind == "avg":
        out = windows.mean(axis=2)

        def back(g):
            contrib = np.broadcast_to((g.reshape(c, -1) / (window * window))[:, :, None],
                                      windows.shape)
            chan_off = (np.arange(c) * (h * w))[:, None, None]
            full = np.bincount((idx[None, :, :] + chan_off).reshape(-1),
                               weights=contrib.reshape(-1), minlength=c * h * w)
            return [full.reshape(c, h, w)]

        return make_op(out.reshape(c, h_out, w_out), [x], back)

    arg = windows.argmax(axis=2)  # first occurrence on ties
    out = np.take_along_axis(windows, arg[:, :, None], axis=2)[:, :, 0]
    src = np.take_along_axis(np.broadcast_to(idx, windows.shape), arg[:, :, None], axis=2)[:, :, 0]

    def back(g):
        chan_off = (np.arange(c) * (h * w))[:, None]
        full = np.bincount((src + chan_off).reshape(-1),
                           weights=g.reshape(c, -1).reshape(-1), minlength=c * h * w)
        return [full.reshape(c, h, w)]

    return make_op(out.reshape(c, h_out, w_out), [x], back)


def _resize_matrix(size, factor):
    """Row-interpolation matrix (factor*size, size), align-corners-false."""
    key = (size, factor)
    hit = _RESIZE_CACHE.get(key)
    if hit is not None:
        return hit
    out = np.zeros((factor * size, size))
    for i in range(factor * size):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), size - 1.0)  # edge clamp
        lo = int(np.floor(src))
        hi = min(lo + 1, size - 1)
        frac = src - lo
        out[i, lo] += 1.0 - frac
        out[i, hi] += frac
    _RESIZE_CACHE[key] = out
    return out


def bilinear_upsample(x, factor):
    """Bilinear upsampling of a (C,H,W) tensor by an integer factor.

    Output sample (i,j) reads source coordinate ((i+0.5)/f - 0.5,
    (j+0.5)/f - 0.5), clamped at the edges.
    """
    if x.ndim != 3:
        raise ShapeError("bilinear_upsample input must be (C,H,W), got %s" % (x.shape,))
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError("upsample factor must be an integer >= 1, got %r" % (factor,))
    if factor == 1:
        def back(g):
            return [g]

        return make_op(x.data, [x], back)

    _, h, w = x.shape
    ay = _resize_matrix(h, factor)
    ax = _resize_matrix(w, factor)

    def back(g):
        return [ay.T @ g @ ax]

    return make_op(ay @ x.data @ ax.T, [x], back)


def upsample_array(a, factor):
    """Plain-array bilinear upsampling with the same convention as the op."""
    a = np.asarray(a, dtype=np.float64)
    if factor == 1:
        return a
    squeeze = a.ndim == 2
    if squeeze:
        a = a[None]
    ay = _resize_matrix(a.shape[1], factor)
    ax = _resize_matrix(a.shape[2], factor)
    out = ay @ a @ ax.T
    return out[0] if squeeze else out
