"""First-order optimizers over autodiff leaves."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def _clip_scale(params: list[Tensor], clip: float | None) -> float:
    """Factor that rescales the joint gradient to global L2 norm at most ``clip``."""
    if clip is None:
        return 1.0
    norm = np.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None))
    return clip / norm if norm > clip else 1.0


class SGD:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0, clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self._vel = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        scale = _clip_scale(self.params, self.clip)
        for p, v in zip(self.params, self._vel):
            if p.grad is None:
                continue
            g = p.grad * scale
            if self.momentum:
                v *= self.momentum
                v += g
                p.data -= self.lr * v
            else:
                p.data -= self.lr * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        scale = _clip_scale(self.params, self.clip)
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(kind: str, params, lr: float, clip: float | None = None):
    if kind == "sgd":
        return SGD(params, lr, clip=clip)
    if kind == "adam":
        return Adam(params, lr, clip=clip)
    raise ValueError(f"unknown optimizer {kind!r}")
