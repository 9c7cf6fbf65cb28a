"""Adam optimizer over autograd tensors."""

from __future__ import annotations

import numpy as np

from .autograd import InvalidValueError


class Adam:
    """Standard Adam with bias correction.

    Frozen parameters are skipped entirely: no moment update, no step. A
    non-finite gradient aborts the whole step before any parameter moves.
    """

    def __init__(self, named_params, lr=0.0001, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.params = list(named_params)
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        active = [(name, p) for name, p in self.params if not p.frozen]
        for name, p in active:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise InvalidValueError(
                    f"non-finite gradient in parameter {name!r}; step aborted")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in active:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
