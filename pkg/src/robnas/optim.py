"""SGD-with-momentum and Adam parameter updates."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["SGD", "Adam", "optimizer_step"]


class _OptimizerState:
    kind = "base"

    def __init__(self, lr, weight_decay=0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self._buffers: dict[int, dict] = {}

    def _check(self, params, grads):
        if len(params) != len(grads):
            raise ValueError("params and grads must align one-to-one")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")

    def step(self, params, grads):
        raise NotImplementedError


class SGD(_OptimizerState):
    """SGD with classical momentum: v <- m*v + (g + wd*w); w <- w - lr*v."""

    kind = "sgd"

    def __init__(self, lr, momentum=0.0, weight_decay=0.0):
        super().__init__(lr, weight_decay)
        self.momentum = float(momentum)

    def step(self, params, grads):
        self._check(params, grads)
        for p, g in zip(params, grads):
            gd = g.data if isinstance(g, Tensor) else np.asarray(g)
            if self.weight_decay:
                gd = gd + self.weight_decay * p.data
            if self.momentum:
                buf = self._buffers.setdefault(id(p), {"v": np.zeros_like(p.data)})
                buf["v"] = self.momentum * buf["v"] + gd
                gd = buf["v"]
            p.data[...] = p.data - self.lr * gd
        return params


class Adam(_OptimizerState):
    """Adam with bias correction; epsilon added outside the square root."""

    kind = "adam"

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        super().__init__(lr, weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)

    def step(self, params, grads):
        self._check(params, grads)
        for p, g in zip(params, grads):
            gd = g.data if isinstance(g, Tensor) else np.asarray(g)
            if self.weight_decay:
                gd = gd + self.weight_decay * p.data
            buf = self._buffers.setdefault(
                id(p), {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            )
            buf["t"] += 1
            buf["m"] = self.beta1 * buf["m"] + (1 - self.beta1) * gd
            buf["v"] = self.beta2 * buf["v"] + (1 - self.beta2) * gd * gd
            mhat = buf["m"] / (1 - self.beta1 ** buf["t"])
            vhat = buf["v"] / (1 - self.beta2 ** buf["t"])
            p.data[...] = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params


def optimizer_step(state, params, grads):
    """Apply one update; parameter data is updated in place and returned."""
    return state.step(params, grads)
