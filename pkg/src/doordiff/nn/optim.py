"""Adam with bias correction and an exponential moving average tracker."""

from __future__ import annotations

import numpy as np

from doordiff.nn.tensor import Parameter


class Adam:
    """Standard Adam; parameters without a gradient are left untouched."""

    def __init__(self, params: list[Parameter], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.values) for p in self.params}
        self.v = {p.name: np.zeros_like(p.values) for p in self.params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p in self.params:
            if p.grad is None:
                continue
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * (p.grad * p.grad)
            m_hat = m / bias1
            v_hat = v / bias2
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class EmaTracker:
    """Shadow copies updated as shadow <- decay * shadow + (1 - decay) * value."""

    def __init__(self, params: list[Parameter], decay: float = 0.995):
        if not (0.0 <= decay <= 1.0):
            raise ValueError(f"decay must be in [0, 1], got {decay}")
        self.decay = decay
        self.params = list(params)
        self.shadow = {p.name: p.values.copy() for p in self.params}

    def update(self) -> None:
        d = self.decay
        for p in self.params:
            s = self.shadow[p.name]
            s *= d
            s += (1.0 - d) * p.values

    def copy_to_params(self) -> None:
        for p in self.params:
            p.values[...] = self.shadow[p.name]

    def state(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.shadow.items()}
