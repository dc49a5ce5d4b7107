"""AdamW with decoupled weight decay.

Decay is scaled by the learning rate (theta <- theta * (1 - lr*wd)), so a
zero learning rate is a strict no-op and frozen parameters are never
touched: their moment buffers are not even allocated.
"""

from __future__ import annotations

import numpy as np

from .errors import DivergenceError


class AdamW:
    def __init__(self, parameters, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.parameters = list(parameters)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self._m = {}
        self._v = {}

    def zero_grad(self):
        for p in self.parameters:
            p.tensor.grad = None

    def step(self):
        self.steps += 1
        b1t = 1.0 - self.beta1**self.steps
        b2t = 1.0 - self.beta2**self.steps
        for p in self.parameters:
            if not p.trainable:
                continue
            g = p.tensor.grad
            if g is None:
                g = np.zeros_like(p.tensor.data)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for parameter {p.name!r}")
            key = id(p)
            m = self._m.get(key)
            if m is None:
                m = self._m[key] = np.zeros_like(p.tensor.data)
                self._v[key] = np.zeros_like(p.tensor.data)
            v = self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.tensor.data = p.tensor.data * (1.0 - self.lr * self.weight_decay) - self.lr * update
