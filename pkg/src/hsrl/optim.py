"""First-order parameter updates: adaptive moments by default, plain SGD for tests."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import NumericsError


class Optimizer:
    """Adam-style update over a fixed parameter list.

    Parameters whose gradient is absent or exactly zero are skipped
    entirely, so a step with zero gradients is a no-op regardless of
    accumulated moment state. With `sgd=True` the update degrades to
    `p -= lr * g` (no moments), which keeps convergence tests exact.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 sgd: bool = False):
        if lr <= 0.0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.sgd = sgd
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """Apply one update from the accumulated gradients."""
        for p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericsError("NaN/Inf gradient; step aborted")
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None or not g.any():
                continue
            if self.sgd:
                p.data -= self.lr * g
                continue
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            mhat = self._m[i] / (1.0 - self.beta1 ** t)
            vhat = self._v[i] / (1.0 - self.beta2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
