from __future__ import annotations

import numpy as np

from .policy.network import RNNParams


class SGD:
    """Gradient descent with optional heavy-ball momentum and global-norm clipping."""

    def __init__(self, learning_rate: float, momentum: float = 0.0, clip_norm: float | None = None):
        if learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.clip_norm = clip_norm
        self._velocity: RNNParams | None = None

    def step(self, params: RNNParams, grads: RNNParams) -> None:
        grads = clip_grads(grads, self.clip_norm)
        if self.momentum:
            if self._velocity is None:
                self._velocity = grads.zeros_like()
            for v, g in zip(self._velocity.arrays(), grads.arrays()):
                v *= self.momentum
                v += g
            grads = self._velocity
        params.axpy(-self.learning_rate, grads)


class Adam:
    def __init__(self, learning_rate: float, betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = None):
        if learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        self.learning_rate = learning_rate
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self._m = self._v = None
        self._t = 0

    def step(self, params: RNNParams, grads: RNNParams) -> None:
        grads = clip_grads(grads, self.clip_norm)
        if self._m is None:
            self._m, self._v = grads.zeros_like(), grads.zeros_like()
        self._t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self._t, 1 - b2**self._t
        for p, g, m, v in zip(params.arrays(), grads.arrays(), self._m.arrays(), self._v.arrays()):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grads(grads: RNNParams, max_norm: float | None) -> RNNParams:
    if not max_norm:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays())))
    if norm <= max_norm:
        return grads
    return grads.scaled(max_norm / norm)


def make_optimizer(name: str, learning_rate: float, momentum: float = 0.0, clip_norm: float | None = None):
    if name == "sgd":
        return SGD(learning_rate, momentum, clip_norm)
    if name == "adam":
        return Adam(learning_rate, clip_norm=clip_norm)
    raise ValueError(f"unknown optimizer {name!r}")
