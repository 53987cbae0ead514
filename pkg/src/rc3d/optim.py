"""SGD with momentum and Adam; state lives on each Parameter."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import DTYPE, InvalidArgument, Parameter


class SGD:
    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                if p.momentum is None:
                    p.momentum = np.zeros_like(p.data)
                p.momentum = (self.momentum * p.momentum + g).astype(DTYPE)
                g = p.momentum
            p.data = (p.data - self.lr * g).astype(DTYPE)
            p.step += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self) -> None:
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            if p.grad is None:
                continue
            if p.moment1 is None:
                p.moment1 = np.zeros_like(p.data)
                p.moment2 = np.zeros_like(p.data)
            p.step += 1
            g = p.grad.astype(DTYPE)
            p.moment1 = (b1 * p.moment1 + (1 - b1) * g).astype(DTYPE)
            p.moment2 = (b2 * p.moment2 + (1 - b2) * g * g).astype(DTYPE)
            m_hat = p.moment1 / (1 - b1 ** p.step)
            v_hat = p.moment2 / (1 - b2 ** p.step)
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(DTYPE)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(params: Iterable[Parameter], mode: str, lr: float, **hyper):
    if mode == "sgd":
        return SGD(params, lr, momentum=hyper.get("momentum", 0.0),
                   weight_decay=hyper.get("weight_decay", 0.0))
    if mode == "adam":
        return Adam(params, lr, beta1=hyper.get("beta1", 0.9), beta2=hyper.get("beta2", 0.999),
                    eps=hyper.get("eps", 1e-8))
    raise InvalidArgument(f"optimizer must be 'sgd' or 'adam', got {mode!r}")


def optimizer_step(params: Iterable[Parameter], mode: str, lr: float, **hyper) -> None:
    """Apply one update to ``params`` from their current ``.grad``."""
    make_optimizer(params, mode, lr, **hyper).step()
