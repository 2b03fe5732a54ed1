"""Fully connected networks whose weights live in a ParamStore."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from . import tape as T

ACTIVATIONS = ("softplus", "relu", "linear")


def frequency_encode(x, order):
    """[x, sin(2^l pi x), cos(2^l pi x) for l < order] along the last axis."""
    if order == 0:
        return T.as_var(x)
    x = T.as_var(x)
    parts = [x]
    for level in range(order):
        s = (2.0 ** level) * np.pi
        parts.append(T.sin(x * s))
        parts.append(T.cos(x * s))
    return T.concat(parts, axis=-1)


def frequency_encode_jacobian(x, order):
    """d(encoding)/dx as a (P, d, d*(1+2*order)) Var; block-diagonal per input coordinate."""
    x = T.as_var(x)
    p, d = x.shape
    eye = np.broadcast_to(np.eye(d), (p, d, d))
    if order == 0:
        return T.Var(eye)
    blocks = [T.Var(eye)]
    for level in range(order):
        s = (2.0 ** level) * np.pi
        # d sin(s x_j)/dx_i = delta_ij s cos(s x_j)
        blocks.append(T.expand_dims(T.cos(x * s) * s, 1) * np.eye(d))
        blocks.append(T.expand_dims(T.sin(x * s) * (-s), 1) * np.eye(d))
    return T.concat(blocks, axis=-1)


class Mlp:
    """sizes = [in_dim, hidden..., out_dim]; ``in_dim`` is before frequency encoding."""

    def __init__(self, store, name, sizes, activation="softplus", encoding=0, rng=None,
                 zero_last=False, last_bias=None, init_scale=1.0):
        if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
            raise ConfigError(f"{name}: layer sizes must be >= 2 positive integers, got {sizes}",
                              key=f"{name}.sizes")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"{name}: unknown activation {activation!r}", key=f"{name}.activation")
        self.store = store
        self.name = name
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.encoding = int(encoding)
        rng = np.random.default_rng(0) if rng is None else rng
        dims = [self.encoded_dim] + self.sizes[1:]
        self.n_layers = len(dims) - 1
        for i in range(self.n_layers):
            fan_in, fan_out = dims[i], dims[i + 1]
            bound = init_scale * np.sqrt(3.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            if i == self.n_layers - 1:
                if zero_last:
                    w = np.zeros_like(w)
                if last_bias is not None:
                    b = np.broadcast_to(np.asarray(last_bias, dtype=np.float64), (fan_out,)).copy()
            store.add(f"{name}.w{i}", w)
            store.add(f"{name}.b{i}", b)

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    @property
    def encoded_dim(self):
        return self.sizes[0] * (1 + 2 * self.encoding)

    @property
    def prefix(self):
        return self.name

    def _weights(self, params):
        return [(params(f"{self.name}.w{i}"), params(f"{self.name}.b{i}")) for i in range(self.n_layers)]

    def _act(self, z):
        if self.activation == "softplus":
            return T.softplus(z)
        if self.activation == "relu":
            return T.relu(z)
        return z

    def _act_deriv(self, z):
        if self.activation == "softplus":
            return T.sigmoid(z)
        if self.activation == "relu":
            return T.Var((z.value > 0).astype(np.float64))
        return T.Var(np.ones(z.shape))

    def _check(self, x):
        if x.ndim != 2 or x.shape[-1] != self.in_dim:
            raise ConfigError(f"{self.name}: expected input (P, {self.in_dim}), got {x.shape}",
                              key=f"{self.name}.sizes")

    def forward(self, x, params):
        """x: (P, in_dim). ``params`` maps segment name -> Var (see Params)."""
        x = T.as_var(x)
        self._check(x)
        h = frequency_encode(x, self.encoding)
        layers = self._weights(params)
        for i, (w, b) in enumerate(layers):
            h = T.matmul(h, w) + b
            if i < len(layers) - 1:
                h = self._act(h)
        return h

    __call__ = forward

    def evaluate(self, x):
        """Plain numpy forward pass straight from the store (no tape)."""
        h = np.asarray(x, dtype=np.float64)
        if self.encoding:
            parts = [h]
            for level in range(self.encoding):
                s = (2.0 ** level) * np.pi * h
                parts += [np.sin(s), np.cos(s)]
            h = np.concatenate(parts, axis=-1)
        for i in range(self.n_layers):
            h = h @ self.store[f"{self.name}.w{i}"] + self.store[f"{self.name}.b{i}"]
            if i < self.n_layers - 1:
                if self.activation == "softplus":
                    h = np.maximum(h, 0.0) + np.log1p(np.exp(-np.abs(h)))
                elif self.activation == "relu":
                    h = np.maximum(h, 0.0)
        return h

    def forward_with_jacobian(self, x, params):
        """Output (P, out) and its input Jacobian (P, in_dim, out), both differentiable."""
        x = T.as_var(x)
        self._check(x)
        h = frequency_encode(x, self.encoding)
        jac = frequency_encode_jacobian(x, self.encoding)
        layers = self._weights(params)
        for i, (w, b) in enumerate(layers):
            z = T.matmul(h, w) + b
            jac = T.einsum("pik,kh->pih", jac, w)
            if i < len(layers) - 1:
                h = self._act(z)
                jac = jac * T.expand_dims(self._act_deriv(z), 1)
            else:
                h = z
        return h, jac


class Params:
    """Callable view of a ParamStore for one evaluation.

    In recording mode it hands out gradient leaves (one per segment, cached so
    repeated uses share a node); otherwise plain constant Vars.
    """

    def __init__(self, store, record=True, grad_buffer=None, frozen=()):
        self.store = store
        self.record = record
        self.grad_buffer = grad_buffer
        self.frozen = tuple(frozen)
        self._cache = {}

    def __call__(self, name):
        v = self._cache.get(name)
        if v is None:
            if self.record and T.grad_enabled() and not self._is_frozen(name):
                v = self.store.param(name, self.grad_buffer)
            else:
                v = T.Var(self.store[name])
            self._cache[name] = v
        return v

    def _is_frozen(self, name):
        return any(name == p or name.startswith(p + ".") for p in self.frozen)
