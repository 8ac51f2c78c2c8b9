"""Parameter-holding layers and deterministic per-layer initialization."""

from __future__ import annotations

import zlib

import numpy as np

from . import ops
from .tensor import Tensor


def layer_rng(seed, name):
    """RNG stream derived from (seed, layer name).

    Each layer draws from its own stream, so two models built from the same
    seed share identical parameters for every layer they have in common,
    regardless of construction order.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])


class Conv2dLayer:
    """A named 2-d convolution with He-normal weights and zero bias."""

    def __init__(self, name, c_in, c_out, kernel, stride=1, dilation=1, padding=0,
                 seed=0, zero_init=False, bias=True, init_gain=1.0):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        if zero_init:
            w = np.zeros((c_out, c_in, kernel, kernel))
        else:
            rng = layer_rng(seed, name)
            w = rng.normal(0.0, init_gain * np.sqrt(2.0 / (c_in * kernel * kernel)),
                           (c_out, c_in, kernel, kernel))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          dilation=self.dilation, padding=self.padding)

    def named_parameters(self):
        out = {self.name + ".weight": self.weight}
        if self.bias is not None:
            out[self.name + ".bias"] = self.bias
        return out

    def param_count(self):
        n = self.weight.size
        if self.bias is not None:
            n += self.bias.size
        return n


class LinearLayer:
    """A named fully connected layer applied to (features, 1) column tensors."""

    def __init__(self, name, n_in, n_out, seed=0):
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        rng = layer_rng(seed, name)
        self.weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / n_in), (n_out, n_in)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros((n_out, 1)), requires_grad=True)

    def __call__(self, x):
        from .tensor import add, matmul
        return add(matmul(self.weight, x), self.bias)

    def named_parameters(self):
        return {self.name + ".weight": self.weight, self.name + ".bias": self.bias}

    def param_count(self):
        return self.weight.size + self.bias.size
