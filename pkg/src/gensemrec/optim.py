"""Gradient-ascent optimizers over flat parameter vectors."""

from __future__ import annotations

import numpy as np


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params + self.lr * grad

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        pass


class Adam:
    """Adam for ascent; state is checkpointable as plain arrays."""

    def __init__(self, lr: float, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        return {"adam_m": self.m, "adam_v": self.v, "adam_t": np.array([self.t], dtype=float)}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.m = state["adam_m"].copy()
        self.v = state["adam_v"].copy()
        self.t = int(state["adam_t"][0])


def make_optimizer(name: str, lr: float, size: int):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr, size)
    raise ValueError(f"unknown optimizer {name!r}")
