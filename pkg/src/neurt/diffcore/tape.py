"""Reverse-mode differentiation over numpy arrays.

Every operation on a :class:`Var` that depends on a gradient-carrying input
records a closure mapping the output adjoint to input adjoints.  ``backward``
walks the recorded graph in reverse topological order and accumulates into
leaf sinks (for parameters, a view into ``ParamStore.grads``).

The graph is built dynamically per evaluation, so control flow (hit masks,
sphere tracing) stays ordinary Python.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from ..errors import ConfigError, UsageError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def enable_grad():
    prev = grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev


class Var:
    """An array value plus (optionally) the recipe for its adjoint."""

    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward", "_sink", "_released")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad=False, sink=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._sink = sink
        self._released = False

    # -- convenience -------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Var(shape={self.value.shape}{tag})"

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value)

    def detach(self):
        return Var(self.value)

    # -- operators ---------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _record(value, parents, backward_fn) -> Var:
    if grad_enabled() and any(p.requires_grad for p in parents):
        out = Var(value, requires_grad=True)
        out._parents = parents
        out._backward = backward_fn
        return out
    return Var(value)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = av / bv

    def back(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return _record(out, (a, b), back)


def neg(a):
    a = as_var(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def power(a, p):
    a = as_var(a)
    av = a.value
    p = float(p)
    return _record(av ** p, (a,), lambda g: (g * p * av ** (p - 1.0),))


def square(a):
    a = as_var(a)
    av = a.value
    return _record(av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a):
    a = as_var(a)
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_var(a)
    av = a.value
    return _record(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    a = as_var(a)
    out = np.sqrt(a.value)
    return _record(out, (a,), lambda g: (0.5 * g / out,))


def sin(a):
    a = as_var(a)
    av = a.value
    return _record(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    a = as_var(a)
    av = a.value
    return _record(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def abs_(a):
    a = as_var(a)
    av = a.value
    return _record(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def _sigmoid_np(x):
    return expit(x)


def _softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a):
    a = as_var(a)
    out = _sigmoid_np(a.value)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a, beta=1.0):
    """log(1 + exp(beta*a)) / beta, overflow-safe."""
    a = as_var(a)
    z = beta * a.value
    out = _softplus_np(z) / beta
    return _record(out, (a,), lambda g: (g * _sigmoid_np(z),))


def relu(a):
    a = as_var(a)
    av = a.value
    return _record(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


def maximum(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    pick = av >= bv
    return _record(np.where(pick, av, bv), (a, b),
                   lambda g: (_unbroadcast(g * pick, av.shape), _unbroadcast(g * ~pick, bv.shape)))


def minimum(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    pick = av <= bv
    return _record(np.where(pick, av, bv), (a, b),
                   lambda g: (_unbroadcast(g * pick, av.shape), _unbroadcast(g * ~pick, bv.shape)))


def clip(a, lo, hi):
    a = as_var(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _record(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _record(np.where(cond, a.value, b.value), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                              _unbroadcast(np.where(cond, 0.0, g), sb)))


# ---------------------------------------------------------------------------
# reductions and shape


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def vsum(a, axis=None, keepdims=False):
    a = as_var(a)
    shape = a.shape
    return _record(a.value.sum(axis=axis, keepdims=keepdims), (a,),
                   lambda g: (_expand_reduced(g, shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False):
    a = as_var(a)
    shape = a.shape
    out = a.value.mean(axis=axis, keepdims=keepdims)
    n = a.value.size / max(np.size(out), 1)
    return _record(out, (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims) / n,))


def vmax(a, axis=None, keepdims=False):
    """Hard maximum; the adjoint goes to the first arg-max entry."""
    a = as_var(a)
    av = a.value
    res = av.max(axis=axis, keepdims=keepdims)
    if axis is None:
        onehot = np.zeros(av.size)
        onehot[np.argmax(av)] = 1.0
        onehot = onehot.reshape(av.shape)
    else:
        idx = np.expand_dims(np.argmax(av, axis=axis), axis)
        onehot = np.zeros_like(av)
        np.put_along_axis(onehot, idx, 1.0, axis=axis)
    return _record(res, (a,), lambda g: (_expand_reduced(g, av.shape, axis, keepdims) * onehot,))


def vmin(a, axis=None, keepdims=False):
    return neg(vmax(neg(a), axis, keepdims))


def logsumexp(a, axis=-1, keepdims=False):
    """Shifted log-sum-exp (subtracts the max exponent before exponentiating)."""
    a = as_var(a)
    av = a.value
    m = av.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(av - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    res = out if keepdims else np.squeeze(out, axis=axis)
    return _record(res, (a,), lambda g: (_expand_reduced(g, av.shape, axis, keepdims) * soft,))


def softmax(a, axis=-1):
    a = as_var(a)
    av = a.value
    e = np.exp(av - av.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), back)


def reshape(a, shape):
    a = as_var(a)
    old = a.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_var(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def expand_dims(a, axis):
    a = as_var(a)
    old = a.shape
    return _record(np.expand_dims(a.value, axis), (a,), lambda g: (g.reshape(old),))


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if isinstance(it, (list, np.ndarray)) and np.asarray(it).dtype != bool:
            return True
    return False


def getitem(a, idx):
    a = as_var(a)
    shape = a.shape
    fancy = _is_fancy(idx)

    def back(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _record(a.value[idx], (a,), back)


def concat(vars_, axis=-1):
    vars_ = [as_var(v) for v in vars_]
    sizes = [v.shape[axis] for v in vars_]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([v.value for v in vars_], axis=axis), tuple(vars_), back)


def stack(vars_, axis=-1):
    vars_ = [as_var(v) for v in vars_]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(np.stack([v.value for v in vars_], axis=axis), tuple(vars_), back)


def scatter_rows(n, rows, a, fill=0.0):
    """Place ``a`` at integer rows of an (n, ...) array; other rows hold ``fill``."""
    a = as_var(a)
    rows = np.asarray(rows)
    out = np.full((n,) + a.shape[1:], fill, dtype=np.float64)
    out[rows] = a.value
    return _record(out, (a,), lambda g: (g[rows],))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        return einsum("...ij,...jk->...ik", a, b)

    def back(g):
        return g @ bv.T, av.T @ g

    return _record(av @ bv, (a, b), back)


def einsum(spec, a, b):
    """Two-operand einsum without repeated or operand-private summed indices."""
    a, b = as_var(a), as_var(b)
    ins, out = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    av, bv = a.value, b.value
    res = np.einsum(spec, av, bv, optimize=True)

    def back(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, bv, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, av, optimize=True) if b.requires_grad else None
        if ga is not None and ga.shape != av.shape:
            ga = np.broadcast_to(ga, av.shape)
        if gb is not None and gb.shape != bv.shape:
            gb = np.broadcast_to(gb, bv.shape)
        return ga, gb

    return _record(res, (a, b), back)


def dot(a, b, axis=-1, keepdims=False):
    return vsum(mul(a, b), axis=axis, keepdims=keepdims)


def norm(a, axis=-1, keepdims=False, eps=0.0):
    return sqrt(vsum(square(a), axis=axis, keepdims=keepdims) + eps)


def normalize(a, axis=-1, eps=1e-12):
    return div(a, norm(a, axis=axis, keepdims=True, eps=eps))


def cross(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value

    def back(g):
        return (_unbroadcast(np.cross(bv, g), av.shape), _unbroadcast(np.cross(g, av), bv.shape))

    return _record(np.cross(av, bv), (a, b), back)


# ---------------------------------------------------------------------------
# differentiation drivers


def _toposort(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def _check_root(root):
    if not isinstance(root, Var) or not root.requires_grad:
        raise UsageError("backward called on a value with no recorded forward pass")
    if root._released:
        raise UsageError("graph already consumed by a previous backward call")


def _propagate(root, seed, keep_graph):
    order = _toposort(root)
    grads = {id(root): seed}
    leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves.append((node, g))
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not keep_graph:
            node._backward = None
            node._parents = ()
            node._released = True
    return leaves


def backward(loss, seed=None, keep_graph=False):
    """Accumulate d(loss)/d(leaf) into every reachable leaf.

    Parameter leaves write into their ParamStore gradient view; other leaves
    that require grad collect into ``.grad``.  Repeated calls accumulate.
    """
    _check_root(loss)
    if seed is None:
        if loss.value.size != 1:
            raise ConfigError("backward needs a scalar loss or an explicit seed")
        seed = np.ones_like(loss.value)
    for leaf, g in _propagate(loss, np.asarray(seed, dtype=np.float64), keep_graph):
        g = _unbroadcast(np.asarray(g), leaf.shape)
        if leaf._sink is not None:
            leaf._sink += g
        elif leaf.grad is None:
            leaf.grad = np.array(g, dtype=np.float64)
        else:
            leaf.grad = leaf.grad + g


def grad(output, inputs, seed=None):
    """Gradients of ``output`` w.r.t. ``inputs`` only; parameter sinks are untouched."""
    _check_root(output)
    if seed is None:
        seed = np.ones_like(output.value)
    wanted = {id(v): i for i, v in enumerate(inputs)}
    result = [np.zeros(v.shape) for v in inputs]
    for leaf, g in _propagate(output, np.asarray(seed, dtype=np.float64), keep_graph=True):
        i = wanted.get(id(leaf))
        if i is not None:
            result[i] = result[i] + _unbroadcast(np.asarray(g), leaf.shape)
    return result
