"""A tour of the tensor core: building expressions, backprop, gradient checks.

Run:  python demos/01_autodiff_basics.py
"""

import numpy as np

from sanl.tensor import Tensor, backward, matmul, mul, relu, tsum
from sanl import ops
from sanl.gradcheck import check_gradients

print("== scalars through a tiny expression ==")
x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
y = mul(x, x).sum()          # sum of squares
backward(y)
print("y =", y.item())
print("dy/dx =", x.grad, "(expect 2x)")

print("\n== a convolution and its gradient ==")
image = Tensor(np.random.default_rng(0).normal(size=(1, 6, 6)), requires_grad=True)
kernel = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0), requires_grad=True)
blurred = ops.conv2d(image, kernel, Tensor(np.zeros(1)), padding=1)
backward(tsum(mul(blurred, blurred)))
print("output shape:", blurred.shape)
print("kernel gradient:\n", np.round(kernel.grad[0, 0], 3))

print("\n== finite differences agree with the recorded graph ==")
rng = np.random.default_rng(1)


def build(ts):
    h = relu(ops.conv2d(ts[0], ts[1], ts[2], padding=1))
    return tsum(mul(h, h))


err = check_gradients(build, [rng.normal(size=(2, 5, 5)),
                              rng.normal(size=(3, 2, 3, 3)),
                              rng.normal(size=(3,))])
print("max relative error vs central differences: %.2e" % err)

print("\n== matrix product backward rules ==")
a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
backward(tsum(matmul(a, b)))
print("dA equals column sums of B broadcast:", np.allclose(a.grad, b.data.sum(axis=1)))
