"""Minimal reverse-mode automatic differentiation over numpy arrays.

Define-by-run: each op records its parents and a vector-Jacobian product
closure; ``backward`` walks the graph once in reverse topological order.
Everything is float64. Supports numpy-style broadcasting (gradients are
summed back to the parent shape).

The ``detach``/``mask_grad`` pair implements the straight-through
contracts used by the fine-tuning masks: indices are chosen on detached
values, gathers carry gradient only through the gathered entries, and a
masked node keeps its forward value while its backward contribution is
multiplied by the mask.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Node",
    "constant",
    "parameter",
    "add", "sub", "mul", "div", "neg", "exp", "log", "power",
    "matmul", "relu", "tanh", "softmax", "sum_", "mean_", "max_",
    "take", "concat", "reshape", "transpose", "affine", "detach", "mask_grad",
    "backward", "gradient_check",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "requires_grad", "name")

    def __init__(self, value, parents=(), requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents  # tuple of (Node, vjp callable)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    # operator sugar
    def __add__(self, other): return add(self, _as_node(other))
    def __radd__(self, other): return add(_as_node(other), self)
    def __sub__(self, other): return sub(self, _as_node(other))
    def __rsub__(self, other): return sub(_as_node(other), self)
    def __mul__(self, other): return mul(self, _as_node(other))
    def __rmul__(self, other): return mul(_as_node(other), self)
    def __truediv__(self, other): return div(self, _as_node(other))
    def __rtruediv__(self, other): return div(_as_node(other), self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, other): return matmul(self, _as_node(other))

    def __repr__(self):
        tag = self.name or "node"
        return f"<{tag} shape={self.value.shape} grad={self.requires_grad}>"


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(value, name=None) -> Node:
    return Node(value, name=name)


def parameter(value, name=None) -> Node:
    return Node(np.array(value, dtype=float), requires_grad=True, name=name)


def _op(value, *pairs, name=None):
    parents = tuple((p, fn) for p, fn in pairs if p.requires_grad)
    return Node(value, parents=parents, name=name)


def add(x: Node, y: Node) -> Node:
    return _op(x.value + y.value,
               (x, lambda g: _unbroadcast(g, x.value.shape)),
               (y, lambda g: _unbroadcast(g, y.value.shape)))


def sub(x: Node, y: Node) -> Node:
    return _op(x.value - y.value,
               (x, lambda g: _unbroadcast(g, x.value.shape)),
               (y, lambda g: _unbroadcast(-g, y.value.shape)))


def mul(x: Node, y: Node) -> Node:
    return _op(x.value * y.value,
               (x, lambda g: _unbroadcast(g * y.value, x.value.shape)),
               (y, lambda g: _unbroadcast(g * x.value, y.value.shape)))


def div(x: Node, y: Node) -> Node:
    if np.any(y.value == 0.0):
        raise ZeroDivisionError("division by zero in graph")
    inv = 1.0 / y.value
    return _op(x.value * inv,
               (x, lambda g: _unbroadcast(g * inv, x.value.shape)),
               (y, lambda g: _unbroadcast(-g * x.value * inv * inv, y.value.shape)))


def neg(x: Node) -> Node:
    return _op(-x.value, (x, lambda g: -g))


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return _op(out, (x, lambda g: g * out))


def log(x: Node) -> Node:
    if np.any(x.value <= 0.0):
        raise ValueError("log domain violation")
    return _op(np.log(x.value), (x, lambda g: g / x.value))


def power(x: Node, p: float) -> Node:
    out = x.value**p
    return _op(out, (x, lambda g: g * p * x.value ** (p - 1)))


def matmul(x: Node, y: Node) -> Node:
    out = x.value @ y.value
    def gx(g):
        gg = g @ np.swapaxes(y.value, -1, -2)
        return _unbroadcast(gg, x.value.shape)
    def gy(g):
        gg = np.swapaxes(x.value, -1, -2) @ g
        return _unbroadcast(gg, y.value.shape)
    return _op(out, (x, gx), (y, gy))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _op(np.where(mask, x.value, 0.0), (x, lambda g: g * mask))


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)
    return _op(out, (x, lambda g: g * (1.0 - out * out)))


def softmax(x: Node, axis: int = -1) -> Node:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    def gx(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)
    return _op(out, (x, gx))


def sum_(x: Node, axis=None, keepdims=False) -> Node:
    out = x.value.sum(axis=axis, keepdims=keepdims)
    def gx(g):
        g = np.asarray(g)
        if axis is None:
            return np.broadcast_to(g, x.value.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.value.shape).copy()
    return _op(out, (x, gx))


def mean_(x: Node, axis=None, keepdims=False) -> Node:
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), Node(1.0 / n))


def max_(x: Node, axis=None) -> Node:
    """Max with first-index subgradient at ties (deterministic)."""
    flat_axis = axis
    if axis is None:
        idx = int(np.argmax(x.value))
        out = x.value.ravel()[idx]
        def gx(g):
            grad = np.zeros_like(x.value)
            grad.ravel()[idx] = g
            return grad
        return _op(np.asarray(out), (x, gx))
    idx = np.argmax(x.value, axis=flat_axis)
    out = np.take_along_axis(x.value, np.expand_dims(idx, flat_axis), flat_axis).squeeze(flat_axis)
    def gx(g):
        grad = np.zeros_like(x.value)
        np.put_along_axis(grad, np.expand_dims(idx, flat_axis),
                          np.expand_dims(np.asarray(g), flat_axis), flat_axis)
        return grad
    return _op(out, (x, gx))


_SCATTER_PLANS: dict = {}


def _scatter_plan(indices: np.ndarray, length: int):
    """Sorted segment-sum plan for scatter-adding repeated gather indices."""
    key = (indices.tobytes(), indices.shape, length)
    plan = _SCATTER_PLANS.get(key)
    if plan is None:
        flat = indices.ravel()
        perm = np.argsort(flat, kind="stable")
        sorted_idx = flat[perm]
        starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
        plan = (perm, starts, sorted_idx[starts])
        if len(_SCATTER_PLANS) < 10_000:
            _SCATTER_PLANS[key] = plan
    return plan


def take(x: Node, indices, axis: int = 0) -> Node:
    """Gather along an axis; backward scatters into the source positions."""
    indices = np.asarray(indices)
    ax = axis % x.value.ndim
    out = np.take(x.value, indices, axis=ax)
    def gx(g):
        grad = np.zeros_like(x.value)
        moved = np.moveaxis(grad, ax, 0)
        g_arr = np.asarray(g)
        # bring the index axes (which replaced `ax` in the output) to the front
        idx_axes = tuple(range(ax, ax + indices.ndim))
        g_moved = np.moveaxis(g_arr, idx_axes, tuple(range(indices.ndim)))
        g_flat = g_moved.reshape((indices.size,) + moved.shape[1:])
        # scatter-add with repeated indices, via sort + segment reduction
        # (much faster than np.add.at at these sizes)
        perm, starts, targets = _scatter_plan(indices, moved.shape[0])
        moved[targets] = np.add.reduceat(g_flat[perm], starts, axis=0)
        return grad
    return _op(out, (x, gx))


def concat(nodes, axis: int = 0) -> Node:
    nodes = [_as_node(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)
    pairs = []
    for i, n in enumerate(nodes):
        lo, hi = offsets[i], offsets[i + 1]
        def gx(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return np.asarray(g)[tuple(sl)]
        pairs.append((n, gx))
    return _op(out, *pairs)


def reshape(x: Node, shape) -> Node:
    old = x.value.shape
    return _op(x.value.reshape(shape), (x, lambda g: np.asarray(g).reshape(old)))


def transpose(x: Node, axes) -> Node:
    inv = np.argsort(axes)
    return _op(np.transpose(x.value, axes),
               (x, lambda g: np.transpose(np.asarray(g), inv)))


def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b."""
    return add(matmul(x, w), b)


def detach(x: Node) -> Node:
    """Forward value, no gradient path."""
    return Node(x.value.copy())


def mask_grad(x: Node, mask) -> Node:
    """Straight-through mask: forward unchanged, backward times mask."""
    m = np.asarray(mask, dtype=float)
    return _op(x.value, (x, lambda g: g * m))


def _toposort(root: Node) -> list[Node]:
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents before children


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable node."""
    if root.value.size != 1:
        raise ValueError("backward root must be scalar")
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        # out-of-place accumulation throughout: entries in ``grads`` and
        # ``.grad`` may alias views of each other, so nothing is mutated
        node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in node.parents:
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = np.asarray(pg, dtype=float) if acc is None else acc + pg


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def gradient_check(fn, point: np.ndarray, step: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps a flat float array to a scalar Node built from a fresh
    parameter leaf; gradient_check compares the leaf gradient against
    per-coordinate central differences.
    """
    point = np.asarray(point, dtype=float)
    leaf = parameter(point)
    out = fn(leaf)
    backward(out)
    analytic = leaf.grad.copy()
    numeric = np.zeros_like(point)
    flat = point.ravel()
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            shifted = point.copy()
            shifted.ravel()[i] += sign * step
            numeric.ravel()[i] += sign * float(fn(parameter(shifted)).value)
    numeric /= 2.0 * step
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))
