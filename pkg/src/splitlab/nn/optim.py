"""Plain and adaptive-moment gradient steps over named parameter dicts."""

from __future__ import annotations

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


def _check_finite(grads):
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {key!r}")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr
        self.steps = 0

    def step(self, params: dict, grads: dict) -> dict:
        _check_finite(grads)
        self.steps += 1
        return {k: p - self.lr * grads[k] for k, p in params.items()}


class Adam:
    """First/second-moment update with bias correction.

    Accumulators are created lazily per parameter name, with that
    parameter's shape and dtype.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> dict:
        _check_finite(grads)
        self.steps += 1
        t = self.steps
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        out = {}
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            if self.m[k].shape != p.shape:
                raise ValueError(f"accumulator shape mismatch for {k!r}")
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * (g * g)
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            out[k] = (p - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
        return out
