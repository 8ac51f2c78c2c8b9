"""Non-local and spatial-aware non-local attention blocks, plus Grad-CAM maps.

A non-local block lets every spatial position attend to every other one:
queries, keys and values come from 1x1 projections, similarities are plain
dot products normalized by the position count, and the block output is added
back to its input through a zero-initialized projection (so a freshly
inserted block is an exact identity).

The spatial-aware variant modulates the query/key path by (1 + M) for a
single-channel attention map M in [0, 1], biasing the similarity toward
marked regions; values are taken from the unmodulated input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2dLayer
from .tensor import Tensor, ShapeError, backward, matmul, mul, reshape, transpose, tsum


@dataclass
class AttentionMap:
    """Single-channel spatial map in [0, 1] at a given feature stride."""

    stride: int
    values: np.ndarray  # (H, W)


@dataclass
class NonLocalParams:
    """The four 1x1 projections of one attention block.

    theta/phi/g map channels -> inner_channels; w maps back and is
    zero-initialized with no bias, so w(Y) vanishes at init and whenever the
    value path is zero.
    """

    theta: Conv2dLayer
    phi: Conv2dLayer
    g: Conv2dLayer
    w: Conv2dLayer
    inner_channels: int

    # the query/key/value projections start at half the usual He scale: the
    # similarity is quadratic in them, and full-scale init makes SGD spiral
    # on small feature maps where the 1/N normalization is weak
    PROJECTION_GAIN = 0.5

    @classmethod
    def create(cls, channels, seed=0, name="attn", inner_channels=None):
        inner = max(channels // 2, 1) if inner_channels is None else inner_channels
        gain = cls.PROJECTION_GAIN
        return cls(
            theta=Conv2dLayer(name + ".theta", channels, inner, 1, seed=seed, init_gain=gain),
            phi=Conv2dLayer(name + ".phi", channels, inner, 1, seed=seed, init_gain=gain),
            g=Conv2dLayer(name + ".g", channels, inner, 1, seed=seed, init_gain=gain),
            w=Conv2dLayer(name + ".w", inner, channels, 1, seed=seed, zero_init=True, bias=False),
            inner_channels=inner,
        )

    def named_parameters(self):
        out = {}
        for layer in (self.theta, self.phi, self.g, self.w):
            out.update(layer.named_parameters())
        return out


def _attend(x, q_src, params):
    """Shared tail: project, compute pairwise similarities, aggregate, add back."""
    c, h, w = x.shape
    n = h * w
    if params.theta.c_in != c:
        raise ShapeError("block expects %d channels, input has %d" % (params.theta.c_in, c))
    inner = params.inner_channels
    q = reshape(params.theta(q_src), (inner, n))
    k = reshape(params.phi(q_src), (inner, n))
    v = reshape(params.g(x), (inner, n))
    sim = matmul(transpose(q), k)                  # (n, n): query position i vs key position j
    agg = mul(matmul(v, transpose(sim)), 1.0 / n)  # normalize by position count
    return params.w(reshape(agg, (inner, h, w))) + x


def non_local_forward(x, params):
    """Non-local block over a (C,H,W) tensor; returns w(Y) + X."""
    return _attend(x, x, params)


def sanl_forward(x, attention_map, params):
    """Spatial-aware non-local block: query/key input is X * (1 + M).

    ``attention_map`` is an AttentionMap whose values match the spatial size
    of ``x``; it is treated as a constant (no gradient flows into it).
    """
    values = attention_map.values if isinstance(attention_map, AttentionMap) else np.asarray(attention_map)
    if values.shape != x.shape[1:]:
        raise ShapeError("attention map %s does not match feature map %s"
                         % (values.shape, x.shape))
    modulated = mul(x, Tensor(1.0 + values))
    return _attend(x, modulated, params)


def grad_cam_maps(classifier, image, strides, target_class=None):
    """Attention maps for several strides from one classifier forward/backward.

    Per stride: channel weights are the spatial means of d(score)/d(feature),
    the map is the ReLU of the weighted channel sum, max-normalized to [0, 1]
    (an all-nonpositive sum yields an all-zero map). The classifier's own
    parameter gradients are cleared afterwards; returned maps carry no graph.
    """
    if not getattr(classifier, "trained", False):
        raise RuntimeError("classifier must be marked trained before attention-map extraction")
    img = image if isinstance(image, Tensor) else Tensor(image)
    logits, feats = classifier.forward_with_features(img)
    for s in strides:
        if s not in feats:
            raise ValueError("unknown feature stride %r (have %s)" % (s, sorted(feats)))
    if target_class is None:
        target_class = int(np.argmax(logits.data))
    onehot = np.zeros(logits.shape)
    onehot[target_class] = 1.0
    backward(tsum(mul(logits, Tensor(onehot))))

    maps = {}
    for s in strides:
        feat = feats[s]
        alpha = feat.grad.mean(axis=(1, 2))
        raw = np.maximum(np.tensordot(alpha, feat.data, axes=1), 0.0)
        peak = raw.max()
        vals = raw / peak if peak > 0 else np.zeros_like(raw)
        maps[s] = AttentionMap(stride=s, values=vals)
    classifier.zero_grad()
    return maps


def grad_cam(classifier, image, stride, target_class=None):
    """Single-stride Grad-CAM attention map (see grad_cam_maps)."""
    return grad_cam_maps(classifier, image, [stride], target_class)[stride]
