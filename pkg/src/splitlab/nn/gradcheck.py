"""Central finite-difference check of a stack's analytic gradients."""

from __future__ import annotations

import numpy as np

from splitlab.nn.stack import Stack


class NonFiniteError(FloatingPointError):
    def __init__(self, where: str, index):
        super().__init__(f"non-finite value while perturbing {where} at index {index}")
        self.where = where
        self.index = index


def _rel_err(analytic, numeric):
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def numeric_grad(f, x: np.ndarray, epsilon: float, label: str = "input") -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every coordinate of ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f()
        flat[i] = orig - epsilon
        fm = f()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(label, np.unravel_index(i, x.shape))
        gflat[i] = (fp - fm) / (2 * epsilon)
    return g


def grad_check(stack: Stack, x: np.ndarray, epsilon: float = 1e-5, w: np.ndarray | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and numeric gradients.

    The scalar probed is ``sum(r * stack(x, w))`` for a fixed random ``r``.
    Covers the input, every parameter and, for styled stacks, ``w``. The
    relative error of a coordinate is ``|a - n| / max(1, |n|)``.
    """
    if x.dtype != np.float64 or any(p.dtype != np.float64 for p in stack.params().values()):
        raise TypeError("grad_check requires 64-bit input and parameters")
    x = x.copy()
    w = None if w is None else w.astype(np.float64).copy()
    y, cache = stack.forward(x, w)
    r = np.random.default_rng(seed).standard_normal(y.shape)
    grads = stack.backward(cache, r)

    def objective():
        return float((stack.forward(x, w)[0] * r).sum())

    worst = float(np.max(_vec_rel_err(grads.input, numeric_grad(objective, x, epsilon, "input"))))
    for layer_idx, layer in enumerate(stack.layers):
        for name, p in layer.params.items():
            num = numeric_grad(objective, p, epsilon, f"{layer_idx}.{name}")
            worst = max(worst, float(np.max(_vec_rel_err(grads.params[f"{layer_idx}.{name}"], num))))
    if w is not None and grads.style is not None:
        worst = max(worst, float(np.max(_vec_rel_err(grads.style, numeric_grad(objective, w, epsilon, "w")))))
    return worst


def _vec_rel_err(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def check_scalar_fn(f, grad, x: np.ndarray, epsilon: float = 1e-5) -> float:
    """Same metric for a plain scalar function with a supplied gradient."""
    x = x.astype(np.float64).copy()
    analytic = grad(x)
    num = numeric_grad(lambda: f(x), x, epsilon)
    return float(np.max(_vec_rel_err(analytic, num)))
