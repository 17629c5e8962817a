"""Adam optimizer over a named parameter set."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .engine import Tensor


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.m[name], self.v[name], c1, c2,
                      self.lr, self.beta1, self.beta2, self.eps)

    def reset_slot(self, name: str) -> None:
        """Re-create moment buffers after a parameter changed shape."""
        p = self.params[name]
        self.m[name] = np.zeros_like(p.data)
        self.v[name] = np.zeros_like(p.data)


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              bias1: float, bias2: float, lr: float, beta1: float, beta2: float,
              eps: float) -> None:
    """In-place bias-corrected Adam update of ``param`` and its moment buffers."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    param -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
