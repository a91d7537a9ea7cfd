"""Differentiable image and latent regularizers, plus training losses."""

from __future__ import annotations

import numpy as np

TV_SMOOTHING = 1e-12
VAR_FLOOR = 1e-8


def _tv_diffs(x):
    dv = np.zeros_like(x)
    dh = np.zeros_like(x)
    dv[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    dh[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    return dv, dh


def total_variation(x: np.ndarray):
    """Isotropic total variation of a ``(C, H, W)`` image or ``(B, C, H, W)`` batch.

    Forward differences that fall outside the image count as zero. Returns a
    float for a single image and a length-``B`` array for a batch.
    """
    if x.ndim not in (3, 4):
        raise ValueError(f"expected (C,H,W) or (B,C,H,W), got shape {x.shape}")
    dv, dh = _tv_diffs(x)
    mag = np.sqrt(dv * dv + dh * dh)
    if x.ndim == 3:
        return float(mag.sum())
    return mag.sum(axis=(1, 2, 3))


def total_variation_grad(x: np.ndarray, upstream=1.0) -> np.ndarray:
    """Gradient of :func:`total_variation`; ``upstream`` scales per image for batches.

    The square root is smoothed by ``TV_SMOOTHING`` here only, so the value
    of a constant image stays exactly zero.
    """
    dv, dh = _tv_diffs(x)
    inv = 1.0 / np.sqrt(dv * dv + dh * dh + TV_SMOOTHING)
    gv = dv * inv
    gh = dh * inv
    # d mag_ij / d x_ij = -(dv + dh)/mag; neighbours receive +dv/mag, +dh/mag
    g = -(gv + gh)
    g[..., 1:, :] += gv[..., :-1, :]
    g[..., :, 1:] += gh[..., :, :-1]
    up = np.asarray(upstream, dtype=x.dtype)
    if x.ndim == 4 and up.ndim == 1:
        up = up[:, None, None, None]
    return (g * up).astype(x.dtype)


def kl_gaussian_reg(z: np.ndarray):
    """KL-style penalty pulling per-dimension batch statistics towards N(0, 1).

    ``z`` is ``(B, k)`` or ``(..., B, k)``; mean and (population) variance
    are taken over the ``B`` axis, the variance floored at ``VAR_FLOOR``.
    Returns a float for 2-d input, otherwise one value per leading index.
    """
    if z.ndim < 2:
        raise ValueError("kl_gaussian_reg expects a batch of vectors")
    if z.shape[-2] < 2:
        raise ValueError("batch statistics need at least 2 vectors")
    mu = z.mean(axis=-2)
    var = np.maximum(z.var(axis=-2), VAR_FLOOR)
    val = -0.5 * (1 + np.log(var) - mu * mu - var).sum(axis=-1)
    return float(val) if z.ndim == 2 else val


def kl_gaussian_reg_grad(z: np.ndarray, upstream=1.0) -> np.ndarray:
    n = z.shape[-2]
    mu = z.mean(axis=-2, keepdims=True)
    raw_var = z.var(axis=-2, keepdims=True)
    var = np.maximum(raw_var, VAR_FLOOR)
    d_var = np.where(raw_var > VAR_FLOOR, -0.5 * (1.0 / var - 1.0), 0.0)
    g = mu / n + d_var * 2.0 * (z - mu) / n
    up = np.asarray(upstream, dtype=z.dtype)
    if up.ndim:
        up = up[..., None, None]
    return (g * up).astype(z.dtype)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), (g / n).astype(logits.dtype)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))
