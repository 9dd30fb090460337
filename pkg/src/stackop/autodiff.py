"""A small reverse-mode automatic differentiation engine over numpy arrays.

Each :class:`Tensor` produced by an operation keeps references to its parents
and a closure that pushes the output adjoint back to them. ``backward`` runs
the closures in reverse topological order. Gradients of broadcast operands are
summed back to the operand shape.
"""
from __future__ import annotations

import contextlib

import numpy as np

from stackop.errors import GradientError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # graph plumbing ---------------------------------------------------
    def _accum(self, g):
        g = _unbroadcast(np.asarray(g, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def _accum_at(self, idx, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        if _is_fancy(idx):
            np.add.at(self.grad, idx, g)
        else:
            self.grad[idx] += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise GradientError(f"backward() needs a scalar root, got shape {self.data.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        for node in order:
            if node is not self and node._backward is not None:
                node.grad = None
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape).copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # conveniences -------------------------------------------------------
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
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


# elementwise arithmetic ------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(g / b.data)
        if b.requires_grad:
            b._accum(-g * a.data / b.data**2)

    return _make(a.data / b.data, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: a._accum(-g))


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    return _make(a.data**p, (a,), lambda g: a._accum(g * p * a.data ** (p - 1)))


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: a._accum(2.0 * g * a.data))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: a._accum(g * y))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: a._accum(g / a.data))


def sqrt(a):
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: a._accum(0.5 * g / y))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: a._accum(g * (1.0 - y * y)))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: a._accum(g * mask))


def absolute(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: a._accum(g * np.sign(a.data)))


def sin(a):
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: a._accum(g * np.cos(a.data)))


def maximum(a, b):
    """Elementwise max; ties send the adjoint to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def bw(g):
        if a.requires_grad:
            a._accum(g * pick_a)
        if b.requires_grad:
            b._accum(g * ~pick_a)

    return _make(np.maximum(a.data, b.data), (a, b), bw)


def clip(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: a._accum(g * inside))


# reductions and shape ops -------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape))

    return _make(y, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: a._accum(np.reshape(g, a.data.shape)))


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: a._accum(np.transpose(g, inv)))


def swapaxes(a, i, j):
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: a._accum(np.swapaxes(g, i, j)))


def getitem(a, idx):
    a = as_tensor(a)
    return _make(a.data[idx], (a,), lambda g: a._accum_at(idx, g))


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]

    def bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in ts], axis=axis), tuple(ts), bw)


def concatenate(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def broadcast_to(a, shape):
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: a._accum(g))


# linear algebra -----------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    A = a.data[None, :] if a.data.ndim == 1 else a.data
    B = b.data[:, None] if b.data.ndim == 1 else b.data

    def bw(g):
        G = np.asarray(g)
        if a.data.ndim == 1:
            G = np.expand_dims(G, -2)
        if b.data.ndim == 1:
            G = np.expand_dims(G, -1)
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(G, np.swapaxes(B, -1, -2)), A.shape).reshape(a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(np.swapaxes(A, -1, -2), G), B.shape).reshape(b.data.shape))

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def einsum(spec, *operands):
    """Differentiable einsum for explicit-output specs ``'in1,in2,...->out'``."""
    ops = [as_tensor(o) for o in operands]
    inputs, output = spec.replace(" ", "").split("->")
    in_specs = inputs.split(",")

    def bw(g):
        for i, t in enumerate(ops):
            if not t.requires_grad:
                continue
            others = [o.data for j, o in enumerate(ops) if j != i]
            other_specs = [s for j, s in enumerate(in_specs) if j != i]
            target = in_specs[i]
            grad = np.einsum(",".join([output] + other_specs) + "->" + target, g, *others)
            t._accum(grad)

    return _make(np.einsum(spec, *[o.data for o in ops]), tuple(ops), bw)


# softmax and activations --------------------------------------------------------------


def softmax(a, axis=-1):
    """Max-subtracted softmax along ``axis``, normalized by a sorted-order sum."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    # summing in sorted order makes the result invariant to permuting the heads
    y = e / np.sort(e, axis=axis).sum(axis=axis, keepdims=True)

    def bw(g):
        a._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), bw)


def superexpressive(alpha, t):
    """alpha * t + (1 - alpha) * base(t), base(t) = t mod 2 for t >= 0 and t / (|t| + 1) for t < 0.

    At the jumps of ``t mod 2`` the derivative is the one-sided limit from the left (slope 1).
    """
    alpha, t = as_tensor(alpha), as_tensor(t)
    td = t.data
    base = np.where(td >= 0, np.mod(td, 2.0), td / (np.abs(td) + 1.0))
    dbase = np.where(td >= 0, 1.0, 1.0 / (np.abs(td) + 1.0) ** 2)
    ad = alpha.data

    def bw(g):
        if alpha.requires_grad:
            alpha._accum(g * (td - base))
        if t.requires_grad:
            t._accum(g * (ad + (1.0 - ad) * dbase))

    return _make(ad * td + (1.0 - ad) * base, (alpha, t), bw)


# helpers -----------------------------------------------------------------------------


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def grad(fn, params):
    """Evaluate scalar ``fn()`` and return (value, [d value / d p for p in params])."""
    for p in params:
        p.zero_grad()
    out = fn()
    out.backward()
    return out.item(), [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def numeric_grad(fn, x, h=1e-5):
    """Central finite differences of scalar ``fn(x_array)`` with respect to ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
