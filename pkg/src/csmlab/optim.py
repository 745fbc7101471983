"""Adaptive moment optimizer with decoupled (multiplicative) weight decay."""

from __future__ import annotations

import numpy as np


class NonFiniteGradientError(ValueError):
    def __init__(self, name):
        self.param_name = name
        super().__init__(f"non-finite gradient for parameter '{name}'")


class AdamW:
    """Tracks first/second moment accumulators per named parameter.

    Weight decay is applied directly to the parameter (p *= 1 - lr*wd),
    not folded into the gradient.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, grads):
        """grads: map from parameter name to gradient array."""
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for name, param in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != param.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"'{name}' shape {param.data.shape}"
                )
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bias1
            v_hat = v / bias2
            param.data *= 1.0 - self.lr * self.weight_decay
            param.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_summary(self):
        return {"step": self.step_count, "lr": self.lr, "weight_decay": self.weight_decay}
