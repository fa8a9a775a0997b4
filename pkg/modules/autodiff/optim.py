from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Dict, List, Sequence

import numpy as np

from .tensor import ShapeError, Tensor


class Optimizer(ABC):
    """Updates parameter tensors from gradient arrays via ``Tensor.assign``."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.params: List[Tensor] = list(params)
        self.lr = lr

    def step(self, grads: Sequence) -> None:
        if len(grads) != len(self.params):
            raise ShapeError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for index, (param, grad) in enumerate(zip(self.params, grads)):
            grad = np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=np.float64)
            if grad.shape != param.shape:
                raise ShapeError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
            param.assign(self._update(index, param.data, grad))

    @abstractmethod
    def _update(self, index: int, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return the new value of parameter ``index``."""


class SGD(Optimizer):
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self._velocity: Dict[int, np.ndarray] = {}

    def _update(self, index: int, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.momentum:
            velocity = self.momentum * self._velocity.get(index, np.zeros_like(grad)) + grad
            self._velocity[index] = velocity
            grad = velocity
        return value - self.lr * grad


class Adam(Optimizer):
    """Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8 by default)."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        super().__init__(params, lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: Dict[int, np.ndarray] = {}
        self._v: Dict[int, np.ndarray] = {}
        self._t: Dict[int, int] = {}

    def _update(self, index: int, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        t = self._t.get(index, 0) + 1
        m = self.beta1 * self._m.get(index, np.zeros_like(grad)) + (1 - self.beta1) * grad
        v = self.beta2 * self._v.get(index, np.zeros_like(grad)) + (1 - self.beta2) * grad * grad
        self._t[index], self._m[index], self._v[index] = t, m, v
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        return value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
