"""Layers composed from tensor ops: linear, layernorm, attention, GRU.

Parameter initialization: uniform +-sqrt(6/(fan_in+fan_out)) for weight
matrices, zeros for biases, ones for layernorm gains.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Parameter


def glorot(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


class Module:
    """Container with parameter discovery and a train/eval flag.

    Attributes that are Parameters, Modules, or lists of either are picked up
    automatically, in insertion order, which keeps naming deterministic.
    """

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix=""):
        for key, value in self.__dict__.items():
            if isinstance(value, Parameter):
                yield f"{prefix}{key}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{prefix}{key}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def _child_modules(self):
        for value in self.__dict__.values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def train(self, flag=True):
        self.training = flag
        for child in self._child_modules():
            child.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def assign_names(self, prefix=""):
        """Write the discovery path into each Parameter and check uniqueness."""
        seen = {}
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ConfigError(f"duplicate parameter name {name!r}")
            seen[name] = p
            p.name = name
        return seen


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.w = Parameter(glorot(rng, d_in, d_out))
        self.b = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return T.affine(x, self.w.tensor, self.b.tensor if self.b is not None else None)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return T.layernorm(x, self.gain.tensor, self.bias.tensor, self.eps)


class Dropout(Module):
    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x, rng=None):
        return T.dropout(x, self.rate, training=self.training, rng=rng)


class FeedForward(Module):
    """Two-layer position-wise network with gelu."""

    def __init__(self, d, hidden, rng):
        super().__init__()
        self.lin1 = Linear(d, hidden, rng)
        self.lin2 = Linear(hidden, d, rng)

    def __call__(self, x):
        return self.lin2(T.gelu(self.lin1(x)))


class MultiHeadAttention(Module):
    """Row-wise multi-head attention; records the last per-head weights.

    ``last_attn`` holds detached numpy weight matrices (one per head) for
    inspection and normalization checks.
    """

    def __init__(self, d, heads, rng):
        super().__init__()
        if d % heads != 0:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = d // heads
        self.w_q = Linear(d, d, rng)
        self.w_k = Linear(d, d, rng)
        self.w_v = Linear(d, d, rng)
        self.w_o = Linear(d, d, rng)
        self.last_attn = None

    def __call__(self, query_rows, context_rows=None):
        if context_rows is None:
            context_rows = query_rows
        q = self.w_q(query_rows)
        k = self.w_k(context_rows)
        v = self.w_v(context_rows)
        out, weights = T.mha_core(q, k, v, self.heads)
        self.last_attn = [weights[h] for h in range(self.heads)]
        return self.w_o(out)


class GRUCell(Module):
    """Gated recurrent update of row features.

    z = sig(x Wz + h Uz + bz); r = sig(x Wr + h Ur + br)
    n = tanh(x Wn + (r*h) Un + bn); h' = (1-z)*n + z*h
    """

    def __init__(self, d, rng):
        super().__init__()
        self.w_z = Parameter(glorot(rng, d, d))
        self.u_z = Parameter(glorot(rng, d, d))
        self.b_z = Parameter(np.zeros(d))
        self.w_r = Parameter(glorot(rng, d, d))
        self.u_r = Parameter(glorot(rng, d, d))
        self.b_r = Parameter(np.zeros(d))
        self.w_n = Parameter(glorot(rng, d, d))
        self.u_n = Parameter(glorot(rng, d, d))
        self.b_n = Parameter(np.zeros(d))

    def __call__(self, h, x):
        if h.data.shape != x.data.shape:
            raise ShapeError(f"gru: state {h.data.shape} and input {x.data.shape} differ")
        z = T.sigmoid(T.add(T.add(T.matmul(x, self.w_z.tensor), T.matmul(h, self.u_z.tensor)), self.b_z.tensor))
        r = T.sigmoid(T.add(T.add(T.matmul(x, self.w_r.tensor), T.matmul(h, self.u_r.tensor)), self.b_r.tensor))
        rh = T.mul(r, h)
        n = T.tanh(T.add(T.add(T.matmul(x, self.w_n.tensor), T.matmul(rh, self.u_n.tensor)), self.b_n.tensor))
        one_minus_z = T.shift(T.scale(z, -1.0), 1.0)
        return T.add(T.mul(one_minus_z, n), T.mul(z, h))
