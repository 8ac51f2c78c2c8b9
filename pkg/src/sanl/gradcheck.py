"""Central finite-difference verification of every differentiable operation.

Each check builds random small inputs, computes analytic gradients through
the recorded graph, and compares them against central differences with
h = 1e-5. Inputs for kinked operations (relu, max pooling) are sampled away
from their kinks so the numeric derivative is well defined.
"""

from __future__ import annotations

import time

import numpy as np

from . import ops
from .attention import NonLocalParams, sanl_forward
from .tensor import Tensor, backward, concat, matmul, mul, no_grad, relu, reshape, sigmoid, softmax, tsum
from .train import cross_entropy_logits, landmark_loss

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


def numeric_gradient(f, arrays, index, h=DEFAULT_H):
    """Central differences of scalar ``f(arrays)`` w.r.t. arrays[index]."""
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f(base)
        flat[i] = keep - h
        lo = f(base)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def check_gradients(build, arrays, h=DEFAULT_H):
    """Max relative error between analytic and numeric gradients.

    ``build`` maps a list of Tensors to a scalar Tensor. Relative error per
    element is |a - n| / max(1, |a|, |n|).
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build(tensors))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def evaluate(arrs):
        with no_grad():
            return build([Tensor(a) for a in arrs]).item()

    worst = 0.0
    for idx, a in enumerate(arrays):
        numeric = numeric_gradient(evaluate, arrays, idx, h)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic[idx]), np.abs(numeric)))
        err = float(np.max(np.abs(analytic[idx] - numeric) / denom)) if a.size else 0.0
        worst = max(worst, err)
    return worst


def _away_from_zero(rng, shape, margin=0.25):
    vals = rng.uniform(margin, 1.0, shape)
    signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return vals * signs


def _distinct(rng, shape):
    # strictly spread values so max-pool argmaxes sit far from ties
    flat = rng.permutation(np.arange(np.prod(shape), dtype=np.float64))
    return (flat * 1e-2 + rng.uniform(-0.3, 0.3)).reshape(shape)


def _checks(rng):
    c, h, w = 3, 5, 4

    def loss_of(t):
        return tsum(mul(t, t)) * 0.5 + tsum(t)

    yield "add", [rng.normal(size=(c, h, w)), rng.normal(size=(c, h, w))], \
        lambda ts: loss_of(ts[0] + ts[1])
    yield "sub", [rng.normal(size=(c, h, w)), rng.normal(size=(c, h, w))], \
        lambda ts: loss_of(ts[0] - ts[1])
    yield "mul", [rng.normal(size=(c, h, w)), rng.normal(size=(c, h, w))], \
        lambda ts: loss_of(mul(ts[0], ts[1]))
    yield "mul_broadcast_map", [rng.normal(size=(c, h, w)), rng.normal(size=(h, w))], \
        lambda ts: loss_of(mul(ts[0], ts[1]))
    yield "add_broadcast_scalar", [rng.normal(size=(c, h, w)), rng.normal(size=())], \
        lambda ts: loss_of(ts[0] + ts[1])
    yield "matmul", [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], \
        lambda ts: tsum(matmul(ts[0], ts[1]))
    yield "matmul_quadratic", [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], \
        lambda ts: loss_of(matmul(ts[0], ts[1]))
    yield "relu", [_away_from_zero(rng, (c, h, w))], \
        lambda ts: loss_of(relu(ts[0]))
    yield "sigmoid", [rng.normal(size=(c, h, w))], \
        lambda ts: loss_of(sigmoid(ts[0]))
    yield "softmax", [rng.normal(size=(4, 6))], \
        lambda ts: loss_of(softmax(ts[0], axis=1))
    yield "reshape_transpose", [rng.normal(size=(c, h, w))], \
        lambda ts: loss_of(reshape(ts[0], (c, h * w)).transpose())
    yield "concat", [rng.normal(size=(2, h, w)), rng.normal(size=(3, h, w))], \
        lambda ts: loss_of(concat(ts, axis=0))

    yield "conv1x1", [rng.normal(size=(c, h, w)), rng.normal(size=(2, c, 1, 1)),
                      rng.normal(size=(2,))], \
        lambda ts: loss_of(ops.conv2d(ts[0], ts[1], ts[2]))
    yield "conv3x3_pad1", [rng.normal(size=(c, 6, 6)), rng.normal(size=(2, c, 3, 3)),
                           rng.normal(size=(2,))], \
        lambda ts: loss_of(ops.conv2d(ts[0], ts[1], ts[2], padding=1))
    yield "conv3x3_stride2", [rng.normal(size=(c, 6, 6)), rng.normal(size=(2, c, 3, 3)),
                              rng.normal(size=(2,))], \
        lambda ts: loss_of(ops.conv2d(ts[0], ts[1], ts[2], stride=2, padding=1))
    yield "conv3x3_dilated", [rng.normal(size=(c, 7, 7)), rng.normal(size=(2, c, 3, 3)),
                              rng.normal(size=(2,))], \
        lambda ts: loss_of(ops.conv2d(ts[0], ts[1], ts[2], dilation=2, padding=2))
    yield "maxpool", [_distinct(rng, (c, 6, 6))], \
        lambda ts: loss_of(ops.pool2d(ts[0], "max", 2, 2))
    yield "maxpool_overlap", [_distinct(rng, (c, 5, 5))], \
        lambda ts: loss_of(ops.pool2d(ts[0], "max", 3, 2))
    yield "avgpool", [rng.normal(size=(c, 6, 6))], \
        lambda ts: loss_of(ops.pool2d(ts[0], "avg", 2, 2))
    yield "global_avgpool", [rng.normal(size=(c, 6, 6))], \
        lambda ts: loss_of(ops.pool2d(ts[0], "global-avg"))
    yield "bilinear_upsample", [rng.normal(size=(c, 3, 3))], \
        lambda ts: loss_of(ops.bilinear_upsample(ts[0], 2))

    targets = (rng.random((2, h, w)) > 0.6).astype(np.float64)
    vis = [True, True]
    yield "weighted_bce", [rng.normal(size=(2, h, w))], \
        lambda ts: landmark_loss(ts[0], targets, vis, lambda_p=3.0)
    vis_masked = [True, False]
    yield "weighted_bce_masked", [rng.normal(size=(2, h, w))], \
        lambda ts: landmark_loss(ts[0], targets, vis_masked, lambda_p=3.0)
    cls = int(rng.integers(0, 4))
    yield "cross_entropy", [rng.normal(size=(4,))], \
        lambda ts: cross_entropy_logits(ts[0], cls)


def _sanl_check(rng):
    c, h, w = 4, 3, 3
    params = NonLocalParams.create(c, seed=int(rng.integers(1 << 30)), name="gc.attn")
    # a zero-initialized w would silence the theta/phi/g gradients
    params.w.weight.data[...] = rng.normal(size=params.w.weight.shape)
    m = rng.random((h, w))
    x = rng.normal(size=(c, h, w))
    arrays = [x,
              params.theta.weight.data.copy(), params.theta.bias.data.copy(),
              params.phi.weight.data.copy(), params.phi.bias.data.copy(),
              params.g.weight.data.copy(), params.g.bias.data.copy(),
              params.w.weight.data.copy()]

    def build(tensors):
        params.theta.weight, params.theta.bias = tensors[1], tensors[2]
        params.phi.weight, params.phi.bias = tensors[3], tensors[4]
        params.g.weight, params.g.bias = tensors[5], tensors[6]
        params.w.weight = tensors[7]
        out = sanl_forward(tensors[0], m, params)
        return tsum(mul(out, out))

    return "sanl_block", arrays, build


def run_suite(seed=0, instances=20, tol=DEFAULT_TOL, log=None):
    """Run every gradient check ``instances`` times; returns (ok, results).

    results is a list of (name, max_relative_error) with one entry per
    operation family, aggregated over the random instances.
    """
    say = log or (lambda msg: None)
    start = time.time()
    worst = {}
    for trial in range(instances):
        rng = np.random.default_rng([seed, trial])
        for name, arrays, build in _checks(rng):
            err = check_gradients(build, arrays)
            worst[name] = max(worst.get(name, 0.0), err)
        name, arrays, build = _sanl_check(rng)
        err = check_gradients(build, arrays)
        worst[name] = max(worst.get(name, 0.0), err)
    results = sorted(worst.items())
    ok = True
    for name, err in results:
        status = "ok" if err < tol else "FAIL"
        if err >= tol:
            ok = False
        say("%-22s max rel err %.3e  %s" % (name, err, status))
    say("gradient suite: %d ops x %d instances in %.1fs"
        % (len(results), instances, time.time() - start))
    return ok, results
