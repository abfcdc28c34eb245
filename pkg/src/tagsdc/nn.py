"""Dense float64 tensors with tape-style reverse-mode differentiation.

Only the operations the matching model needs are provided. Every op
returns a new :class:`Tensor` that remembers its parents and a closure
propagating the output gradient back to them; :func:`backward` walks the
recorded graph in reverse topological order.
"""
from __future__ import annotations

import contextlib

import numpy as np

_TINY = 1e-300
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference passes)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def _accumulate(self, g):
        # never in place: incoming buffers may be shared between parents
        self.grad = g if self.grad is None else self.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """A named trainable leaf whose ``grad`` always matches its shape."""

    __slots__ = ()

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    @property
    def tensor(self):
        return self.data

    @property
    def gradient(self):
        return self.grad


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, backward):
    if not _grad_enabled:
        return Tensor(data)
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw)


def relu(x):
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0)

    def bw(g):
        x._accumulate(g * pos)

    return _make(out, (x,), bw)


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), bw)


def log(x):
    safe = np.maximum(x.data, _TINY)

    def bw(g):
        x._accumulate(g / safe)

    return _make(np.log(safe), (x,), bw)


def square(x):
    def bw(g):
        x._accumulate(2.0 * g * x.data)

    return _make(x.data * x.data, (x,), bw)


# ---------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(out, (x,), bw)


def mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x, axes):
    inv = np.argsort(axes)

    def bw(g):
        x._accumulate(g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), bw)


def concat(xs, axis):
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            if x.requires_grad:
                x._accumulate(part)

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def take_rows(table, ids):
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accumulate(full)

    return _make(table.data[ids], (table,), bw)


def index(x, key):
    """Basic or advanced indexing with a scatter-add backward."""

    basic = all(isinstance(k, (slice, int)) for k in (key if isinstance(key, tuple) else (key,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        x._accumulate(full)

    return _make(x.data[key], (x,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), bw)


def affine(x, W, b):
    """``x @ W + b`` with a shape check naming both operands."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(
            f"shape mismatch: x{tuple(x.shape)} vs W{tuple(W.shape)}, b{tuple(b.shape)}"
        )
    return add(matmul(x, W), b)


# ---------------------------------------------------------------- softmax family

def softmax(x, axis=-1, additive_mask=None):
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw)


def softmax_t(logits, tau):
    """Row-wise softmax of ``logits / tau``; rows sum to one."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    return softmax(mul(logits, 1.0 / tau), axis=-1)


def nll(probs, targets, mask=None):
    """Mean of ``-log probs[i, targets[i]]`` over the rows where ``mask`` is set.

    Returns a zero scalar when no row is selected.
    """
    probs = as_tensor(probs)
    targets = np.asarray(targets, dtype=np.int64)
    n = probs.shape[0]
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        return Tensor(0.0)
    picked = index(probs, (rows, targets[rows]))
    return mul(sum_(log(picked)), -1.0 / rows.size)


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(
                inv * (gx - gx.mean(axis=-1, keepdims=True)
                       - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d)
            )

    return _make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- backward

def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Gradients accumulate across calls; zero them between optimizer steps.
    """
    loss = as_tensor(loss)
    if not loss.requires_grad:
        return
    order, seen = [], set()
    stack = [(loss, False)]
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
    # interior nodes get fresh gradient buffers for this pass
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def numerical_gradient(f, param, h=1e-5, coords=None):
    """Central differences of scalar ``f()`` w.r.t. selected flat coordinates."""
    flat = param.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for c in coords:
        old = flat[c]
        flat[c] = old + h
        up = float(as_tensor(f()).data)
        flat[c] = old - h
        down = float(as_tensor(f()).data)
        flat[c] = old
        out.append((up - down) / (2 * h))
    return np.array(out)
