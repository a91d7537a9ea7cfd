"""Attacks that search pixel space directly (rMLE, LM) or invert in one pass (IN)."""

from __future__ import annotations

import time

import numpy as np

from splitlab import nn
from splitlab.attacks.common import (
    AttackConfig,
    AttackResult,
    BestTracker,
    check_finite,
    ensure_batch,
    match_loss_grad,
    per_target_mse,
    read_only,
)


def _pixel_attack(name, h_tar, client, cfg, image_shape, alpha, prior=None, prior_weight=0.0):
    t0 = time.perf_counter()
    h_tar = ensure_batch(h_tar, client.output_shape((1, *image_shape))[1:])
    n = h_tar.shape[0]
    rng = np.random.default_rng(cfg.seed)
    x = rng.uniform(0.0, 1.0, (n, *image_shape)).astype(h_tar.dtype)
    opt = nn.Adam(cfg.lr)
    best = BestTracker(n)
    trace = []
    models = (client,) if prior is None else (client, prior)
    with read_only(*models):
        for step in range(cfg.iterations + 1):
            h, cache = client.forward(x)
            loss = per_target_mse(h, h_tar)
            check_finite(loss, name, step, trace)
            trace.append(loss)
            best.update(loss, x=x)
            if step == cfg.iterations:
                break
            g = client.backward(cache, match_loss_grad(h, h_tar).astype(x.dtype), need_params=False).input
            if alpha:
                g = g + alpha * nn.total_variation_grad(x)
            if prior is not None and prior_weight:
                g = g + prior_weight * _manifold_grad(prior, x)
            x = np.clip(opt.step({"x": x}, {"x": g})["x"], 0.0, 1.0)
    trace = np.array(trace)
    return AttackResult(name, best["x"], best.loss, {"pixels": trace},
                        {"pixels": np.minimum.accumulate(trace, axis=0)},
                        time.perf_counter() - t0, cfg.echo())


def manifold_penalty(prior, x: np.ndarray) -> np.ndarray:
    """Per-image mean of (x - ae(x))^2."""
    return per_target_mse(prior(x), x)


def _manifold_grad(prior, x):
    out, cache = prior.stack.forward(x)
    r = (2.0 / float(np.prod(x.shape[1:]))) * (x - out)
    back = prior.stack.backward(cache, -r, need_params=False).input
    return r + back


def attack_rmle(h_tar, client: nn.Stack, cfg: AttackConfig | None = None,
                image_shape=(3, 16, 16)) -> AttackResult:
    """Gradient descent on pixels from uniform noise: match + alpha * TV.

    Pixels are clipped to [0, 1] after every step; the returned image is
    the iterate with the lowest match loss.
    """
    cfg = cfg or AttackConfig()
    alpha = cfg.tv_weight("rmle", int(np.prod(image_shape)))
    return _pixel_attack("rmle", h_tar, client, cfg, tuple(image_shape), alpha)


def attack_lm(h_tar, client: nn.Stack, ae, cfg: AttackConfig | None = None,
              image_shape=(3, 16, 16)) -> AttackResult:
    """rMLE plus the autoencoder manifold penalty ``lambda * mean (x - ae(x))^2``."""
    cfg = cfg or AttackConfig()
    alpha = cfg.tv_weight("lm", int(np.prod(image_shape)))
    return _pixel_attack("lm", h_tar, client, cfg, tuple(image_shape), alpha,
                         prior=ae, prior_weight=cfg.manifold_weight)


def attack_in(h_tar, inv) -> AttackResult:
    """One forward pass of the inverse network."""
    t0 = time.perf_counter()
    h_tar = ensure_batch(h_tar, inv.h_shape)
    with read_only(inv):
        x = inv(h_tar)
    return AttackResult("in", np.clip(x, 0.0, 1.0), np.full(len(x), np.nan), wall_clock=time.perf_counter() - t0)
