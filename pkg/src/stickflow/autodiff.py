"""Reverse-mode automatic differentiation over numpy-valued expression graphs.

Nodes carry float64 arrays (scalars are 0-d arrays), so the same graph code
evaluates a whole Monte Carlo batch at once.  Every function below dispatches:
called on plain arrays it is ordinary numpy, called on at least one
:class:`Node` it records the operation for the backward pass.  Model code is
therefore written once and used both for fast evaluation and for gradients.

Every forward value is checked for NaN/Inf at creation time and the first
offending operation is named in the raised :class:`GraphError`.
"""
from __future__ import annotations

import numpy as np
from scipy import special as _special

from . import numerics

__all__ = [
    "Node",
    "Parameter",
    "Tape",
    "GraphError",
    "grad",
    "backward",
    "val",
    "as_node",
]

_INV_SQRT_PI_2 = 2.0 / np.sqrt(np.pi)


class GraphError(RuntimeError):
    """Non-finite value produced during the forward pass."""


def _check(value: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(value).all():
        kind = "NaN" if np.isnan(value).any() else "Inf"
        raise GraphError(f"{kind} produced by op '{op}'")
    return value


class Node:
    """One value in the expression graph."""

    __slots__ = ("value", "parents", "vjps", "op")
    # keep numpy from intercepting binary operators on (ndarray, Node) pairs
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjps=(), op="constant"):
        v = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=float)
        if v.dtype != np.float64:
            v = v.astype(np.float64)
        self.value = _check(v, op)
        self.parents = parents
        self.vjps = vjps
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)


class Parameter(Node):
    """A trainable leaf with a stable tag."""

    __slots__ = ("tag",)

    def __init__(self, value, tag: str):
        super().__init__(value, op=f"param:{tag}")
        self.tag = tag


def val(x) -> np.ndarray:
    """Underlying array of a node, or the input itself."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _is_node(*xs) -> bool:
    return any(isinstance(x, Node) for x in xs)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, fwd, vjp_a, vjp_b, op):
    if not _is_node(a, b):
        return fwd(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    a, b = as_node(a), as_node(b)
    out = fwd(a.value, b.value)
    sa, sb = a.value.shape, b.value.shape
    return Node(
        out,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(vjp_a(g), sa),
            lambda g: _unbroadcast(vjp_b(g), sb),
        ),
        op=op,
    )


def _unary(x, fwd, make_vjp, op):
    if not isinstance(x, Node):
        return fwd(np.asarray(x, dtype=float))
    out = fwd(x.value)
    return Node(out, parents=(x,), vjps=(make_vjp(x.value, out),), op=op)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    return _binary(a, b, np.add, lambda g: g, lambda g: g, "add")


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g, "sub")


def mul(a, b):
    av, bv = val(a), val(b)
    return _binary(a, b, np.multiply, lambda g: g * bv, lambda g: g * av, "mul")


def div(a, b):
    av, bv = val(a), val(b)
    return _binary(a, b, np.divide, lambda g: g / bv, lambda g: -g * av / (bv * bv), "div")


def neg(x):
    return _unary(x, np.negative, lambda xv, out: (lambda g: -g), "neg")


def power(x, exponent):
    """x ** c for a constant real exponent."""
    if isinstance(exponent, Node):
        raise TypeError("exponent must be a constant")
    c = float(exponent)
    return _unary(x, lambda v: np.power(v, c),
                  lambda xv, out: (lambda g: g * c * np.power(xv, c - 1.0)), f"pow[{c}]")


def matmul(a, b):
    if not _is_node(a, b):
        return np.matmul(a, b)
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul supports 2-d operands only")
    av, bv = a.value, b.value
    return Node(
        av @ bv,
        parents=(a, b),
        vjps=(lambda g: g @ bv.T, lambda g: av.T @ g),
        op="matmul",
    )


def matinv(x):
    """Matrix inverse of a small square matrix."""
    if not isinstance(x, Node):
        return np.linalg.inv(x)
    inv = np.linalg.inv(x.value)
    return Node(inv, parents=(x,), vjps=(lambda g: -inv.T @ g @ inv.T,), op="matinv")


# ---------------------------------------------------------------------------
# elementwise transcendentals


def exp(x):
    return _unary(x, np.exp, lambda xv, out: (lambda g: g * out), "exp")


def log(x):
    return _unary(x, np.log, lambda xv, out: (lambda g: g / xv), "log")


def log1p(x):
    return _unary(x, np.log1p, lambda xv, out: (lambda g: g / (1.0 + xv)), "log1p")


def expm1(x):
    return _unary(x, np.expm1, lambda xv, out: (lambda g: g * (out + 1.0)), "expm1")


def sqrt(x):
    return _unary(x, np.sqrt, lambda xv, out: (lambda g: 0.5 * g / out), "sqrt")


def square(x):
    return _unary(x, np.square, lambda xv, out: (lambda g: 2.0 * g * xv), "square")


def tanh(x):
    return _unary(x, np.tanh, lambda xv, out: (lambda g: g * (1.0 - out * out)), "tanh")


def softplus(x):
    return _unary(x, lambda v: np.logaddexp(0.0, v),
                  lambda xv, out: (lambda g: g * _special.expit(xv)), "softplus")


def sigmoid(x):
    return _unary(x, _special.expit,
                  lambda xv, out: (lambda g: g * out * (1.0 - out)), "sigmoid")


def absolute(x):
    # subgradient 0 at the kink
    return _unary(x, np.abs, lambda xv, out: (lambda g: g * np.sign(xv)), "abs")


def erfc(x):
    return _unary(x, _special.erfc,
                  lambda xv, out: (lambda g: g * (-_INV_SQRT_PI_2) * np.exp(-xv * xv)),
                  "erfc")


def erfcinv(x):
    def fwd(v):
        if np.any(v <= 0.0) or np.any(v >= 2.0):
            raise GraphError("erfcinv argument outside (0, 2)")
        return _special.erfcinv(v)

    def make_vjp(xv, out):
        deriv = -(np.sqrt(np.pi) / 2.0) * np.exp(out * out)
        return lambda g: g * deriv

    return _unary(x, fwd, make_vjp, "erfcinv")


def log_erfc(x):
    """log(erfc(x)), numerically stable in the far right tail."""

    def fwd(v):
        pos = v > 0.0
        return np.where(pos, np.log(_special.erfcx(np.where(pos, v, 0.0))) - v * v,
                        np.log(_special.erfc(np.where(pos, 0.0, v))))

    def make_vjp(xv, out):
        pos = xv > 0.0
        deriv = np.where(
            pos,
            -_INV_SQRT_PI_2 / _special.erfcx(np.where(pos, xv, 0.0)),
            -_INV_SQRT_PI_2 * np.exp(-xv * xv) / _special.erfc(np.where(pos, 0.0, xv)),
        )
        return lambda g: g * deriv

    return _unary(x, fwd, make_vjp, "log_erfc")


# ---------------------------------------------------------------------------
# structural ops


def sum_(x, axis=None, keepdims=False):
    if not isinstance(x, Node):
        return np.sum(x, axis=axis, keepdims=keepdims)
    xv = x.value

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, xv.shape).copy() if np.ndim(g) == 0 else np.full(xv.shape, g)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, xv.shape).copy()

    return Node(np.sum(xv, axis=axis, keepdims=keepdims), parents=(x,), vjps=(vjp,), op="sum")


def mean(x, axis=None, keepdims=False):
    xv = val(x)
    n = xv.size if axis is None else xv.shape[axis]
    return sum_(x, axis=axis, keepdims=keepdims) / float(n)


def where(cond, a, b):
    """Select elementwise; ``cond`` is a plain boolean array, never a node."""
    cond = np.asarray(cond, dtype=bool)
    if not _is_node(a, b):
        return np.where(cond, a, b)
    a, b = as_node(a), as_node(b)
    out = np.where(cond, a.value, b.value)
    sa, sb = a.value.shape, b.value.shape
    return Node(
        out,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(np.where(cond, g, 0.0), sa),
            lambda g: _unbroadcast(np.where(cond, 0.0, g), sb),
        ),
        op="where",
    )


def clip_lower(x, lo):
    """max(x, lo) with gradient only on the unclamped side."""
    return where(val(x) >= lo, x, lo * np.ones(())) if isinstance(x, Node) else np.maximum(x, lo)


def take(x, idx):
    """Basic/advanced indexing with scatter-add backward."""
    if not isinstance(x, Node):
        return np.asarray(x, dtype=float)[idx]
    xv = x.value

    def vjp(g):
        out = np.zeros_like(xv)
        np.add.at(out, idx, g)
        return out

    return Node(xv[idx], parents=(x,), vjps=(vjp,), op="take")


def take_along(x, indices, axis):
    """Gather along an axis (np.take_along_axis) with accumulating backward."""
    indices = np.asarray(indices)
    if not isinstance(x, Node):
        return np.take_along_axis(np.asarray(x, dtype=float), indices, axis=axis)
    xv = x.value
    grids = list(np.indices(indices.shape))
    grids[axis] = indices
    grids = tuple(grids)

    def vjp(g):
        out = np.zeros_like(xv)
        np.add.at(out, grids, g)
        return out

    return Node(np.take_along_axis(xv, indices, axis=axis), parents=(x,), vjps=(vjp,),
                op="take_along")


def concatenate(parts, axis=0):
    if not _is_node(*parts):
        return np.concatenate(parts, axis=axis)
    parts = [as_node(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * parts[i].value.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Node(
        np.concatenate([p.value for p in parts], axis=axis),
        parents=tuple(parts),
        vjps=tuple(make_vjp(i) for i in range(len(parts))),
        op="concat",
    )


def stack(parts, axis=0):
    if not _is_node(*parts):
        return np.stack(parts, axis=axis)
    parts = [as_node(p) for p in parts]

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return Node(
        np.stack([p.value for p in parts], axis=axis),
        parents=tuple(parts),
        vjps=tuple(make_vjp(i) for i in range(len(parts))),
        op="stack",
    )


def reshape(x, shape):
    if not isinstance(x, Node):
        return np.reshape(x, shape)
    old = x.value.shape
    return Node(np.reshape(x.value, shape), parents=(x,),
                vjps=(lambda g: np.reshape(g, old),), op="reshape")


def cumsum(x, axis=-1):
    if not isinstance(x, Node):
        return np.cumsum(x, axis=axis)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return Node(np.cumsum(x.value, axis=axis), parents=(x,), vjps=(vjp,), op="cumsum")


def logaddexp(a, b):
    """Stabilized log(exp(a) + exp(b)) with numpy broadcasting."""
    if not _is_node(a, b):
        return np.logaddexp(a, b)
    shape = np.broadcast_shapes(np.shape(val(a)), np.shape(val(b)))
    zero = np.zeros(shape)
    return logsumexp(stack([as_node(a + zero), as_node(b + zero)], axis=0), axis=0)


def logsumexp(x, axis=None, keepdims=False):
    """Stabilized log-sum-exp; the max shift is treated as a constant."""
    m = np.max(val(x), axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = sum_(exp(x - m), axis=axis, keepdims=True)
    out = log(shifted) + m
    if not keepdims and axis is not None:
        out = reshape(out, np.squeeze(val(out), axis=axis).shape)
    elif not keepdims:
        out = reshape(out, ())
    return out


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Topologically ordered record of one backward pass."""

    def __init__(self, nodes, adjoints):
        self.nodes = nodes
        self.adjoints = adjoints

    def adjoint(self, node: Node):
        return self.adjoints.get(id(node))


def _topo_order(root: Node):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(f: Node) -> Tape:
    """Run reverse-mode accumulation from a scalar output node."""
    if not isinstance(f, Node):
        raise TypeError("backward expects a Node")
    if f.value.size != 1:
        raise ValueError("backward requires a scalar output")
    order = _topo_order(f)
    adjoints = {id(f): np.ones_like(f.value)}
    for node in reversed(order):
        g = adjoints.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            acc = adjoints.get(id(parent))
            adjoints[id(parent)] = contrib if acc is None else acc + contrib
    return Tape(order, adjoints)


def grad(f: Node, params) -> dict:
    """Gradient of a scalar expression with respect to tagged parameters.

    Parameters unused by ``f`` get exact zeros.  Duplicate tags are
    rejected because the result is keyed by tag.
    """
    params = list(params)
    tags = [p.tag for p in params]
    if len(set(tags)) != len(tags):
        raise ValueError("parameter tags must be unique within one graph")
    tape = backward(f)
    out = {}
    for p in params:
        g = tape.adjoint(p)
        out[p.tag] = np.zeros_like(p.value) if g is None else np.broadcast_to(g, p.value.shape) + 0.0
    return out
