"""Optimisers over dicts of named numpy arrays (updated in place)."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(base_lr, step, total_steps):
    if total_steps <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


class SGD:
    def __init__(self, params, lr, total_steps, momentum=0.0):
        self.params = params
        self.lr = lr
        self.total_steps = total_steps
        self.momentum = momentum
        self.step_count = 0
        self._velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        lr = cosine_lr(self.lr, self.step_count, self.total_steps)
        for name in sorted(grads):
            g = grads[name]
            if self.momentum:
                v = self._velocity[name]
                v *= self.momentum
                v += g
                g = v
            self.params[name] -= lr * g
        self.step_count += 1
        return lr


class Adam:
    def __init__(self, params, lr, total_steps=None, betas=(0.9, 0.999), eps=1e-8, lr_scale=None):
        self.params = params
        self.lr = lr
        self.total_steps = total_steps
        self.b1, self.b2 = betas
        self.eps = eps
        self.lr_scale = lr_scale or {}
        self.step_count = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.step_count += 1
        t = self.step_count
        lr = self.lr if self.total_steps is None else cosine_lr(self.lr, t - 1, self.total_steps)
        c1 = 1.0 - self.b1**t
        c2 = 1.0 - self.b2**t
        for name in sorted(grads):
            g = grads[name]
            m, v = self._m[name], self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            scale = self.lr_scale.get(name, 1.0)
            self.params[name] -= scale * lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr
