"""Reverse-mode automatic differentiation over dense float64 arrays.

Every value is a `Tensor` wrapping a row-major numpy array. Operations
record their parents and a backward closure; the closures themselves are
written in terms of Tensor operations, so calling `grad` on the result of
a previous `grad` call yields correct second derivatives (needed for the
Lipschitz gradient penalty).
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Dense row-major float64 array plus the graph edge that produced it."""

    __slots__ = ("data", "parents", "bwd", "requires_grad")

    def __init__(self, data, parents=(), bwd=None, requires_grad=False):
        self.data = data
        self.parents = parents
        self.bwd = bwd
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; mixed operands are promoted to constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def tensor(value, requires_grad=False):
    """Public constructor: validates shape/data consistency and finiteness."""
    data = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("tensor entries must be finite (NaN/Inf rejected)")
    return Tensor(data, requires_grad=requires_grad)


def constant(value):
    return Tensor(np.asarray(value, dtype=np.float64))


def _wrap(value):
    return value if isinstance(value, Tensor) else constant(value)


def zeros(shape):
    return Tensor(np.zeros(shape, dtype=np.float64))


def ones(shape):
    return Tensor(np.ones(shape, dtype=np.float64))


# ---------------------------------------------------------------------------
# primitives


def _reduce_to(g, shape):
    """Sum-reduce a broadcast gradient back to the parent's shape."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, ss) in enumerate(zip(g.data.shape, shape)) if ss == 1 and gs != 1
    )
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


def add(a, b):
    def bwd(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return Tensor(a.data + b.data, (a, b), bwd)


def sub(a, b):
    def bwd(g):
        return _reduce_to(g, a.data.shape), _reduce_to(neg(g), b.data.shape)

    return Tensor(a.data - b.data, (a, b), bwd)


def neg(a):
    def bwd(g):
        return (neg(g),)

    return Tensor(-a.data, (a,), bwd)


def mul(a, b):
    def bwd(g):
        return _reduce_to(mul(g, b), a.data.shape), _reduce_to(mul(g, a), b.data.shape)

    return Tensor(a.data * b.data, (a, b), bwd)


def reciprocal(a):
    out = Tensor(1.0 / a.data, (a,), None)

    def bwd(g):
        return (neg(mul(g, mul(out, out))),)

    out.bwd = bwd
    return out


def div(a, b):
    return mul(a, reciprocal(b))


def matmul(a, b):
    def bwd(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return Tensor(a.data @ b.data, (a, b), bwd)


def transpose(a):
    def bwd(g):
        return (transpose(g),)

    return Tensor(a.data.T, (a,), bwd)


def tanh(a):
    out = Tensor(np.tanh(a.data), (a,), None)

    def bwd(g):
        return (mul(g, sub(constant(1.0), mul(out, out))),)

    out.bwd = bwd
    return out


def sigmoid(a):
    out = Tensor(1.0 / (1.0 + np.exp(-a.data)), (a,), None)

    def bwd(g):
        return (mul(g, mul(out, sub(constant(1.0), out))),)

    out.bwd = bwd
    return out


def exp(a):
    out = Tensor(np.exp(a.data), (a,), None)

    def bwd(g):
        return (mul(g, out),)

    out.bwd = bwd
    return out


def log(a):
    def bwd(g):
        return (div(g, a),)

    return Tensor(np.log(a.data), (a,), bwd)


def softplus(a):
    """log(1 + exp(a)), numerically stable; gradient is sigmoid(a)."""

    def bwd(g):
        return (mul(g, sigmoid(a)),)

    return Tensor(np.logaddexp(0.0, a.data), (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (mul(g, ones(a.data.shape)),)
        gk = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            gk = reshape(g, tuple(shape))
        return (mul(gk, ones(a.data.shape)),)

    return Tensor(np.asarray(data), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), constant(1.0 / float(n)))


def reshape(a, shape):
    def bwd(g):
        return (reshape(g, a.data.shape),)

    return Tensor(a.data.reshape(shape), (a,), bwd)


def concat(tensors, axis):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        grads, start = [], 0
        for size in sizes:
            grads.append(narrow(g, axis, start, size))
            start += size
        return tuple(grads)

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def narrow(a, axis, start, length):
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def bwd(g):
        return (_embed(g, axis, start, a.data.shape),)

    return Tensor(a.data[index], (a,), bwd)


def _embed(g, axis, start, shape):
    """Adjoint of narrow: place g into a zero array of the given shape."""
    length = g.data.shape[axis]

    def bwd(gg):
        return (narrow(gg, axis, start, length),)

    data = np.zeros(shape, dtype=np.float64)
    index = [slice(None)] * len(shape)
    index[axis] = slice(start, start + length)
    data[tuple(index)] = g.data
    return Tensor(data, (g,), bwd)


def sqrt_guard(a):
    """Element-wise sqrt whose derivative is defined as 0 where a == 0."""
    out = Tensor(np.sqrt(a.data), (a,), None)
    # shift the denominator by 1 exactly where the output is 0; there the
    # incoming cotangent is multiplied by x/denom = 0/1 in every use site,
    # realizing the zero-subgradient convention for the norm
    mask = constant((out.data == 0.0).astype(np.float64))

    def bwd(g):
        return (mul(g, mul(constant(0.5), reciprocal(add(out, mask)))),)

    out.bwd = bwd
    return out


def l2_norm_rows(a):
    """Row-wise Euclidean norm of a 2-D tensor; d‖x‖/dx := 0 at x = 0."""
    return sqrt_guard(tsum(mul(a, a), axis=1))


# ---------------------------------------------------------------------------
# reverse pass


def grad(out, wrt, out_grad=None):
    """Gradients of `out` w.r.t. each tensor in `wrt`.

    The returned tensors stay connected to the graph, so they can be used
    to build further differentiable expressions (double backprop). Tensors
    in `wrt` must have requires_grad set.
    """
    for leaf in wrt:
        if not leaf.requires_grad:
            raise ValueError("grad target does not require grad")
    if out_grad is None:
        out_grad = ones(out.data.shape)
    elif not isinstance(out_grad, Tensor):
        out_grad = constant(out_grad)
    if out_grad.data.shape != out.data.shape:
        raise ValueError(
            f"out_grad shape {out_grad.data.shape} != output shape {out.data.shape}"
        )

    topo, visited = [], set()
    stack = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    grads = {id(out): out_grad}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None or node.bwd is None:
            if node.bwd is None:
                grads[id(node)] = g  # keep leaf gradients for lookup below
            continue
        for parent, pg in zip(node.parents, node.bwd(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else add(prev, pg)

    result = []
    for leaf in wrt:
        g = grads.get(id(leaf))
        result.append(zeros(leaf.data.shape) if g is None else g)
    return result
