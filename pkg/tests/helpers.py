"""Independent scalar oracles the tests check the library against.

Everything here is written as plain loops over indices, deliberately not
sharing code with the library implementations it verifies.
"""

import math

import numpy as np


def loop_mul_broadcast(a, b):
    """Elementwise product of (C,H,W) with an (H,W) map, one index at a time."""
    c, h, w = a.shape
    out = np.zeros((c, h, w))
    for ci in range(c):
        for y in range(h):
            for x in range(w):
                out[ci, y, x] = a[ci, y, x] * b[y, x]
    return out


def loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def loop_conv2d(x, w, b=None, stride=1, dilation=1, padding=0):
    c_out, c_in, k, _ = w.shape
    _, h, wid = x.shape
    h_out = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    w_out = (wid + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for co in range(c_out):
        for oy in range(h_out):
            for ox in range(w_out):
                acc = 0.0 if b is None else float(b[co])
                for ci in range(c_in):
                    for ky in range(k):
                        for kx in range(k):
                            iy = oy * stride + ky * dilation - padding
                            ix = ox * stride + kx * dilation - padding
                            if 0 <= iy < h and 0 <= ix < wid:
                                acc += x[ci, iy, ix] * w[co, ci, ky, kx]
                out[co, oy, ox] = acc
    return out


def scalar_bilinear_upsample(x, factor):
    """Per-output-pixel evaluation of the align-corners-false sampling formula."""
    c, h, w = x.shape
    out = np.zeros((c, h * factor, w * factor))
    for ci in range(c):
        for i in range(h * factor):
            sy = min(max((i + 0.5) / factor - 0.5, 0.0), h - 1.0)
            y0 = int(math.floor(sy))
            y1 = min(y0 + 1, h - 1)
            fy = sy - y0
            for j in range(w * factor):
                sx = min(max((j + 0.5) / factor - 0.5, 0.0), w - 1.0)
                x0 = int(math.floor(sx))
                x1 = min(x0 + 1, w - 1)
                fx = sx - x0
                r0 = (1 - fx) * x[ci, y0, x0] + fx * x[ci, y0, x1]
                r1 = (1 - fx) * x[ci, y1, x0] + fx * x[ci, y1, x1]
                out[ci, i, j] = (1 - fy) * r0 + fy * r1
    return out


def _conv1x1(x, w, b):
    c_out, c_in = w.shape[0], w.shape[1]
    _, h, wid = x.shape
    out = np.zeros((c_out, h, wid))
    for co in range(c_out):
        for y in range(h):
            for xx in range(wid):
                acc = 0.0 if b is None else float(b[co])
                for ci in range(c_in):
                    acc += w[co, ci, 0, 0] * x[ci, y, xx]
                out[co, y, xx] = acc
    return out


def brute_force_non_local(x, params, attention=None):
    """Per-position-pair evaluation of the (spatial-aware) non-local block.

    For every query position i the output is the 1/N-weighted sum over all
    positions j of similarity(i, j) times the value projection at j, then
    projected by w and added to the input. When ``attention`` is given, the
    query/key projections read x * (1 + attention) instead of x.
    """
    c, h, wid = x.shape
    n = h * wid
    if attention is not None:
        mod = np.zeros_like(x)
        for ci in range(c):
            for y in range(h):
                for xx in range(wid):
                    mod[ci, y, xx] = x[ci, y, xx] * (1.0 + attention[y, xx])
    else:
        mod = x
    q = _conv1x1(mod, params.theta.weight.data, params.theta.bias.data)
    k = _conv1x1(mod, params.phi.weight.data, params.phi.bias.data)
    v = _conv1x1(x, params.g.weight.data, params.g.bias.data)
    inner = q.shape[0]
    qf = q.reshape(inner, n)
    kf = k.reshape(inner, n)
    vf = v.reshape(inner, n)
    y = np.zeros((inner, n))
    for i in range(n):
        for j in range(n):
            sim = 0.0
            for t in range(inner):
                sim += qf[t, i] * kf[t, j]
            for t in range(inner):
                y[t, i] += sim * vf[t, j] / n
    out = _conv1x1(y.reshape(inner, h, wid), params.w.weight.data, None)
    return out + x


def scalar_gaussian_target(landmarks, sigma, map_size, image_size):
    stride = image_size / map_size
    k = len(landmarks)
    out = np.zeros((k, map_size, map_size))
    for c, (px, py) in enumerate(landmarks):
        mx, my = px / stride, py / stride
        for y in range(map_size):
            for x in range(map_size):
                d2 = (x - mx) ** 2 + (y - my) ** 2
                out[c, y, x] = math.exp(-d2 / (2.0 * sigma * sigma))
    return out


def scalar_weighted_bce(logits, targets, visibility, lambda_p, visible_only=True):
    """Double-loop BCE with positive weighting and visibility masking."""
    k, h, w = logits.shape
    channels = [c for c in range(k) if (not visible_only) or visibility[c]]
    n = len(channels) * h * w
    if n == 0:
        return 0.0
    total = 0.0
    for c in channels:
        for y in range(h):
            for x in range(w):
                s = 1.0 / (1.0 + math.exp(-logits[c, y, x]))
                t = targets[c, y, x]
                total += lambda_p * t * math.log(s) + (1.0 - t) * math.log(1.0 - s)
    return -total / n


def flood_fill_decode(up, threshold, factor, input_size):
    """Reference decoder for one upsampled activation channel.

    Explicit BFS flood fill with 4-connectivity, component choice by
    (size, summed activation, smaller label), fsum-weighted centroid, and
    the same grid-offset correction as the library.
    """
    size = up.shape[0]
    offset = 0.5 - factor / 2.0
    visited = np.zeros_like(up, dtype=bool)
    components = []
    label = 0
    for sy in range(size):
        for sx in range(size):
            if up[sy, sx] > threshold and not visited[sy, sx]:
                label += 1
                stack = [(sy, sx)]
                visited[sy, sx] = True
                pixels = []
                while stack:
                    y, x = stack.pop()
                    pixels.append((y, x))
                    for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                        if 0 <= ny < size and 0 <= nx < size \
                                and up[ny, nx] > threshold and not visited[ny, nx]:
                            visited[ny, nx] = True
                            stack.append((ny, nx))
                total = math.fsum(up[y, x] for y, x in pixels)
                components.append((len(pixels), total, -label, pixels))
    if not components:
        flat = int(np.argmax(up))
        uy, ux = divmod(flat, size)
        x = min(max(ux + offset, 0.0), input_size - 1.0)
        y = min(max(uy + offset, 0.0), input_size - 1.0)
        return x, y, float(up[uy, ux]), 1
    components.sort()
    _, total, _, pixels = components[-1]
    wx = math.fsum(up[y, x] * x for y, x in pixels)
    wy = math.fsum(up[y, x] * y for y, x in pixels)
    cx = wx / total
    cy = wy / total
    conf = max(up[y, x] for y, x in pixels)
    x = min(max(cx + offset, 0.0), input_size - 1.0)
    y = min(max(cy + offset, 0.0), input_size - 1.0)
    return x, y, float(conf), len(pixels)
