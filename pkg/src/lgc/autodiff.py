"""Reverse-mode automatic differentiation on NumPy arrays.

A tiny tape: every operation that sees a :class:`Tensor` records a node
holding the forward value, the parent tensors, and a closure computing
vector-Jacobian products.  ``backward`` walks the recorded graph once in
reverse topological order and accumulates gradients into every node.

Operations dispatch on their inputs.  Plain ndarrays and floats flow
through untouched (no tape, no overhead), so the same model code serves
both gradient-taped training and fast inference.  Anything a gradient
must flow through has to be built from the ops in this module; NumPy
ufuncs applied directly to a Tensor raise, which is the guard against
silently untaped operations.

Shapes follow NumPy broadcasting; backward sums gradients over the
broadcast axes.  All values are float64.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class Tensor:
    """A node in the computation graph: value plus backward bookkeeping."""

    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, leaf={self.vjp is None})"

    # Arithmetic sugar so model code reads like plain NumPy.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    # Refuse silent NumPy dispatch: np.tanh(tensor) etc. must fail loudly
    # instead of producing an untaped value.
    def __array__(self, *args, **kwargs):
        raise TypeError(
            "untaped operation encountered: use the autodiff ops on Tensor inputs"
        )

    __array_ufunc__ = None


def is_tensor(x):
    return isinstance(x, Tensor)


def value_of(x):
    """Underlying ndarray (or scalar) of a Tensor or passthrough."""
    return x.value if isinstance(x, Tensor) else x


def _any_tensor(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of NumPy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(value, parents, vjp):
    return Tensor(value, parents=tuple(parents), vjp=vjp)


# ---------------------------------------------------------------------------
# elementary ops


def add(a, b):
    if not _any_tensor(a, b):
        return np.add(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.add(av, bv)
    parents, sides = [], []
    if is_tensor(a):
        parents.append(a)
        sides.append(np.shape(av))
    if is_tensor(b):
        parents.append(b)
        sides.append(np.shape(bv))
    return _node(out, parents, lambda g: tuple(_unbroadcast(g, s) for s in sides))


def neg(a):
    if not is_tensor(a):
        return np.negative(a)
    return _node(np.negative(a.value), (a,), lambda g: (-g,))


def sub(a, b):
    return add(a, neg(b))


def mul(a, b):
    if not _any_tensor(a, b):
        return np.multiply(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.multiply(av, bv)
    parents, vjps = [], []
    if is_tensor(a):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g * bv, np.shape(av)))
    if is_tensor(b):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(g * av, np.shape(bv)))
    return _node(out, parents, lambda g: tuple(f(g) for f in vjps))


def reciprocal(a):
    if not is_tensor(a):
        return np.reciprocal(np.asarray(a, dtype=np.float64))
    out = np.reciprocal(a.value)
    return _node(out, (a,), lambda g: (-g * out * out,))


def div(a, b):
    if not _any_tensor(a, b):
        return np.divide(a, b)
    return mul(a, reciprocal(b))


def matmul(a, b):
    if not _any_tensor(a, b):
        return np.matmul(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.matmul(av, bv)
    parents, vjps = [], []
    if is_tensor(a):
        parents.append(a)
        vjps.append(lambda g: np.matmul(g, bv.T))
    if is_tensor(b):
        parents.append(b)
        vjps.append(lambda g: np.matmul(av.T, g))
    return _node(out, parents, lambda g: tuple(f(g) for f in vjps))


def relu(x):
    if not is_tensor(x):
        return np.maximum(x, 0.0)
    mask = x.value > 0.0
    return _node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def tanh(x):
    if not is_tensor(x):
        return np.tanh(x)
    out = np.tanh(x.value)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def logistic(x):
    """Standard logistic sigmoid 1 / (1 + exp(-x))."""
    if not is_tensor(x):
        return expit(np.asarray(x, dtype=np.float64))
    out = expit(x.value)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x, beta=1.0):
    """Smooth hinge (1/beta) * log(1 + exp(beta * x)), overflow-safe."""
    if not is_tensor(x):
        return np.logaddexp(0.0, np.multiply(beta, x)) / beta
    out = np.logaddexp(0.0, beta * x.value) / beta
    return _node(out, (x,), lambda g: (g * expit(beta * x.value),))


def absolute(x):
    if not is_tensor(x):
        return np.abs(x)
    sign = np.sign(x.value)
    return _node(np.abs(x.value), (x,), lambda g: (g * sign,))


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes through strictly inside the box."""
    if not is_tensor(x):
        return np.clip(x, lo, hi)
    mask = (x.value > lo) & (x.value < hi)
    return _node(np.clip(x.value, lo, hi), (x,), lambda g: (g * mask,))


def total(x, axis=None):
    """Sum over an axis (or everything)."""
    if not is_tensor(x):
        return np.sum(x, axis=axis)
    shape = x.value.shape
    out = np.sum(x.value, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy() if shape else np.asarray(g),)
        ge = np.expand_dims(g, axis)
        return (np.broadcast_to(ge, shape).copy(),)

    return _node(out, (x,), vjp)


def mean(x):
    n = value_of(x).size
    return div(total(x), float(n))


def amax(x):
    """Global maximum; ties share the subgradient equally."""
    if not is_tensor(x):
        return np.max(x)
    out = np.max(x.value)
    mask = x.value == out

    def vjp(g):
        return (g * mask / mask.sum(),)

    return _node(out, (x,), vjp)


def maximum(a, b):
    """Elementwise max of two inputs; ties split the gradient evenly."""
    if not _any_tensor(a, b):
        return np.maximum(a, b)
    av, bv = np.asarray(value_of(a), float), np.asarray(value_of(b), float)
    out = np.maximum(av, bv)
    wa = np.where(av > bv, 1.0, np.where(av == bv, 0.5, 0.0))
    parents, vjps = [], []
    if is_tensor(a):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g * wa, np.shape(av)))
    if is_tensor(b):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(g * (1.0 - wa), np.shape(bv)))
    return _node(out, parents, lambda g: tuple(f(g) for f in vjps))


def transpose(x):
    if not is_tensor(x):
        return np.transpose(x)
    return _node(x.value.T, (x,), lambda g: (g.T,))


def unstack(x):
    """Split a stacked array along axis 0 into a list of views/nodes."""
    if not is_tensor(x):
        return [x[k] for k in range(x.shape[0])]
    out = []
    for k in range(x.value.shape[0]):
        def vjp(g, _k=k):
            full = np.zeros_like(x.value)
            full[_k] = g
            return (full,)

        out.append(_node(x.value[k], (x,), vjp))
    return out


def kron_const(p, q):
    """Kronecker product p (x) q where q is a constant matrix."""
    q = np.asarray(q, dtype=np.float64)
    if not is_tensor(p):
        return np.kron(p, q)
    out = np.kron(p.value, q)
    a, b = p.value.shape
    n, m = q.shape

    def vjp(g):
        return (np.einsum("anbm,nm->ab", g.reshape(a, n, b, m), q),)

    return _node(out, (p,), vjp)


def detach(x):
    """Stop gradient: returns the plain value, cutting the tape."""
    return value_of(x)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root):
    """Iterative post-order over the graph reachable from root."""
    order, seen, stack = [], set(), [(root, False)]
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


def backward(out, seed=1.0):
    """Accumulate gradients of `out` into every tensor it depends on.

    Visits each node exactly once, children before parents.  `out` must be
    scalar unless an explicit seed of matching shape is given.
    """
    if not is_tensor(out):
        raise TypeError("backward needs a Tensor output")
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != out.value.shape:
        if out.value.shape == ():
            seed = seed.reshape(())
        else:
            raise ValueError("seed shape does not match output shape")
    order = _topo_order(out)
    for node in order:
        node.grad = None
    out.grad = seed
    for node in reversed(order):
        if node.grad is None or node.vjp is None:
            continue
        gs = node.vjp(node.grad)
        for parent, g in zip(node.parents, gs):
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g


def grad(fn, params):
    """Gradients of a scalar-valued closure w.r.t. a dict of arrays.

    Wraps each array in a leaf Tensor, evaluates fn on the dict of leaves,
    runs backward, and returns (value, grads) with grads matching the
    input shapes.  Parameters the closure never touches get zero gradient.
    """
    leaves = {k: Tensor(v) for k, v in params.items()}
    out = fn(leaves)
    if not is_tensor(out):
        raise TypeError("closure must return a taped scalar Tensor")
    if out.value.shape != ():
        raise ValueError("closure must return a scalar")
    backward(out)
    grads = {}
    for k, leaf in leaves.items():
        if leaf.grad is None:
            grads[k] = np.zeros_like(leaf.value)
        else:
            grads[k] = np.asarray(leaf.grad, dtype=np.float64).reshape(leaf.value.shape)
    return float(out.value), grads
