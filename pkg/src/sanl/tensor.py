"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation eagerly records its parent tensors and a backward rule on
the output, so the recorded program is always in topological order.
``backward`` replays it in reverse and accumulates gradients into every
tensor that requires them. Layout is single-sample: feature maps are
(channels, height, width), double precision throughout.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class GradientError(RuntimeError):
    """backward() misuse: non-scalar loss, detached tensor, or a repeat call."""


_GRAD_ENABLED = [True]
_DEBUG_CHECKS = [False]


def set_debug_checks(on):
    """Enable NaN/Inf detection on every tensor creation (debug mode)."""
    _DEBUG_CHECKS[0] = bool(on)


class no_grad:
    """Context manager that disables graph recording (evaluation paths)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if _DEBUG_CHECKS[0] and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor of shape %s" % (arr.shape,))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item() needs a size-1 tensor, got shape %s" % (self.shape,))
        return float(self.data)

    def detach(self):
        """A view of the same values with no graph attached."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tsum(self) * (1.0 / self.data.size)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return "Tensor(shape=%s%s)" % (list(self.shape), flag)

    # operator sugar; the right operand may be a Tensor, scalar, or trailing-shape map
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def make_op(data, parents, backward_fn):
    """Wrap an op result; records the backward rule if any parent needs grads.

    ``backward_fn(out_grad)`` must return one gradient array (or None) per
    parent, and must not mutate ``out_grad`` in place.
    """
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_broadcast(a_shape, b_shape):
    if b_shape == a_shape or b_shape == ():
        return
    if len(b_shape) < len(a_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape:
        return
    raise ShapeError("operand shape %s does not broadcast over %s" % (b_shape, a_shape))


def _reduce_to(g, shape):
    # sum away the leading axes numpy broadcasting introduced
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def back(g):
        return [g, _reduce_to(g, b.shape)]

    return make_op(a.data + b.data, [a, b], back)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def back(g):
        return [g, -_reduce_to(g, b.shape)]

    return make_op(a.data - b.data, [a, b], back)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def back(g):
        return [g * bd, _reduce_to(g * ad, b.shape)]

    return make_op(ad * bd, [a, b], back)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul needs 2-d operands, got %s and %s" % (a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul inner dimensions disagree: %s vs %s" % (a.shape, b.shape))
    ad, bd = a.data, b.data

    def back(g):
        da = g @ bd.T if a.requires_grad else None
        db = ad.T @ g if b.requires_grad else None
        return [da, db]

    return make_op(ad @ bd, [a, b], back)


def tsum(x):
    """Sum of all elements, as a 0-d tensor."""
    x = _as_tensor(x)
    shape = x.shape

    def back(g):
        return [np.broadcast_to(g, shape).copy()]

    return make_op(np.sum(x.data), [x], back)


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("cannot reshape %s to %s" % (old, shape))

    def back(g):
        return [g.reshape(old)]

    return make_op(data, [x], back)


def transpose(x):
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("transpose needs a 2-d tensor, got %s" % (x.shape,))

    def back(g):
        return [g.T]

    return make_op(x.data.T, [x], back)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return outs

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0  # subgradient 0 at the kink

    def back(g):
        return [g * mask]

    return make_op(np.where(mask, x.data, 0.0), [x], back)


def sigmoid_array(x):
    """Numerically stable logistic function on a plain array."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    x = _as_tensor(x)
    s = sigmoid_array(x.data)

    def back(g):
        return [g * s * (1.0 - s)]

    return make_op(s, [x], back)


def softmax(x, axis):
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return [s * (g - dot)]

    return make_op(s, [x], back)


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede consumers


def backward(loss):
    """Populate .grad on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate across calls (batched training sums per-sample
    contributions); clear them with zero_grad between steps. A second call
    on the same loss tensor is an error.
    """
    if not isinstance(loss, Tensor):
        raise GradientError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GradientError("backward needs a scalar loss, got shape %s" % (loss.shape,))
    if loss._backward is None:
        raise GradientError("loss is detached from any recorded graph")
    if loss._backward_done:
        raise GradientError("backward already called on this tensor")
    loss._backward_done = True

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
