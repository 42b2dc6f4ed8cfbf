"""Trainable parameters, the Adam optimizer and EMA target updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    """Named leaf tensor with a zero-initialized gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class Adam:
    """Adam with bias correction. Gradients are left untouched by ``step``."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("parameter names must be unique within one optimizer")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()
        for p in self.params:
            self.state.m[p.name] = np.zeros_like(p.data)
            self.state.v[p.name] = np.zeros_like(p.data)

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.state.step += 1
        t = self.state.step
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = p.grad
            m = self.state.m[p.name]
            v = self.state.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / c1
            v_hat = v / c2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)


def ema_update(target: Parameter, online: Parameter, momentum: float):
    """target <- momentum * target + (1 - momentum) * online, componentwise."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"EMA momentum must lie in [0, 1], got {momentum}")
    if target.data.shape != online.data.shape:
        raise ShapeError(
            f"EMA shapes disagree: {target.data.shape} vs {online.data.shape}"
        )
    target.data *= momentum
    target.data += (1.0 - momentum) * online.data
