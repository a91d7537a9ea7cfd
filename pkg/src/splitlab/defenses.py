"""Representation- and training-time defenses.

``noise`` and ``prune`` transform h on the client before transmission;
``nopeek`` and ``siamese`` add a term to the target's training loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("none", "noise", "prune", "nopeek", "siamese")


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    b: float = 1.0          # Laplace scale (noise)
    ratio: float = 0.1      # pruned channel fraction R (prune)
    lambda2: float = 5.0    # dCor weight (nopeek)
    lambda3: float = 0.005  # contrastive weight (siamese)
    margin: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.b < 0 or not 0 <= self.ratio <= 1 or self.lambda2 < 0 or self.lambda3 < 0:
            raise ValueError("defense hyperparameters out of range")

    @property
    def at_wire(self) -> bool:
        return self.kind in ("noise", "prune")

    @property
    def at_training(self) -> bool:
        return self.kind in ("nopeek", "siamese")

    def label(self) -> str:
        return {"none": "none", "noise": f"noise(b={self.b:g})", "prune": f"prune(R={self.ratio:g})",
                "nopeek": f"nopeek(l2={self.lambda2:g})",
                "siamese": f"siamese(l3={self.lambda3:g})"}[self.kind]


def noise_mask(h: np.ndarray, b: float, seed) -> np.ndarray:
    """Add i.i.d. Laplace(0, b) noise."""
    if b < 0:
        raise ValueError("Laplace scale must be non-negative")
    if b == 0:
        return h.copy()
    rng = np.random.default_rng(seed)
    return (h + rng.laplace(0.0, b, size=h.shape)).astype(h.dtype)


def channel_variance(h: np.ndarray) -> np.ndarray:
    return h.reshape(*h.shape[:-2], -1).var(axis=-1)


def disco_prune(h: np.ndarray, ratio: float, scorer=channel_variance) -> np.ndarray:
    """Zero the ``ceil(ratio * C)`` highest-scoring channels of each sample.

    ``h`` is ``(C, H, W)`` or ``(B, C, H, W)``. ``scorer`` is either a callable
    mapping h to per-channel scores or a fixed score array.
    """
    if not 0 <= ratio <= 1:
        raise ValueError("pruning ratio must be within [0, 1]")
    single = h.ndim == 3
    hb = h[None] if single else h
    n_channels = hb.shape[1]
    k = math.ceil(ratio * n_channels - 1e-12)
    scores = scorer(hb) if callable(scorer) else np.broadcast_to(np.asarray(scorer), hb.shape[:2])
    out = hb.copy()
    if k > 0:
        # stable sort on negated scores: ties broken by lower channel index
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        for i in range(hb.shape[0]):
            out[i, order[i]] = 0
    return out[0] if single else out


def apply_wire_defense(h: np.ndarray, cfg: DefenseConfig | None, seed=None) -> np.ndarray:
    if cfg is None or not cfg.at_wire:
        return h
    if cfg.kind == "noise":
        return noise_mask(h, cfg.b, cfg.seed if seed is None else seed)
    return disco_prune(h, cfg.ratio)


def _pairwise(x):
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def _double_center(d):
    return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()


def _dcor_parts(x, h):
    if x.shape[0] != h.shape[0]:
        raise ValueError("batches must have the same length")
    if x.shape[0] < 2:
        raise ValueError("distance correlation needs at least 2 samples")
    x = x.reshape(x.shape[0], -1).astype(np.float64)
    h = h.reshape(h.shape[0], -1).astype(np.float64)
    a, b = _double_center(_pairwise(x)), _pairwise(h)
    bc = _double_center(b)
    n2 = x.shape[0] ** 2
    dcov = (a * bc).sum() / n2
    vx = (a * a).sum() / n2
    vh = (bc * bc).sum() / n2
    return h, a, b, bc, dcov, vx, vh


def distance_correlation(x: np.ndarray, h: np.ndarray) -> float:
    """Sample distance correlation of two batches (flattened per sample).

    Defined as 0 when either batch has zero distance variance.
    """
    _, _, _, _, dcov, vx, vh = _dcor_parts(x, h)
    if vx <= 0 or vh <= 0:
        return 0.0
    return float(math.sqrt(max(dcov, 0.0) / math.sqrt(vx * vh)))


def distance_correlation_grad(x: np.ndarray, h: np.ndarray) -> tuple[float, np.ndarray]:
    """Distance correlation and its gradient w.r.t. ``h``."""
    hf, a, b, bc, dcov, vx, vh = _dcor_parts(x, h)
    n2 = hf.shape[0] ** 2
    if vx <= 0 or vh <= 0 or dcov <= 0:
        return 0.0, np.zeros_like(h)
    denom = math.sqrt(vx * vh)
    r2 = dcov / denom
    r = math.sqrt(r2)
    # centering is a projection, so d dcov/db = A/n^2 and d vh/db = 2B/n^2
    g_b = (a / n2) / denom - 0.5 * dcov / math.sqrt(vx) * vh ** -1.5 * (2.0 * bc / n2)
    g_b = g_b / (2.0 * r)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(b > 0, 1.0 / b, 0.0)
    s = (g_b + g_b.T) * unit
    g_h = s.sum(axis=1)[:, None] * hf - s @ hf
    return r, g_h.reshape(h.shape).astype(h.dtype)


def siamese_loss(h_a: np.ndarray, h_b: np.ndarray, same_source: bool, margin: float = 1.0) -> float:
    """Contrastive loss: squared distance for same-source pairs, squared hinge otherwise."""
    if h_a.shape != h_b.shape:
        raise ValueError("siamese pair must have equal shapes")
    d = float(np.sqrt(((h_a - h_b) ** 2).sum()))
    if same_source:
        return d * d
    return max(0.0, margin - d) ** 2


def siamese_batch_loss(h: np.ndarray, labels: np.ndarray, margin: float = 1.0):
    """Mean contrastive loss over all within-batch pairs (same label = same source)."""
    n = h.shape[0]
    hf = h.reshape(n, -1).astype(np.float64)
    d = _pairwise(hf)
    same = labels[:, None] == labels[None, :]
    iu = np.triu_indices(n, 1)
    hinge = np.maximum(margin - d, 0.0)
    per = np.where(same, d * d, hinge * hinge)
    n_pairs = len(iu[0])
    loss = per[iu].sum() / n_pairs
    # d(d^2)/dh_i = 2(h_i-h_j); d(hinge^2)/dh_i = -2 hinge (h_i-h_j)/d
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(same, 2.0, np.where(d > 0, -2.0 * hinge / d, 0.0))
    coef = np.triu(coef, 1)
    coef = coef + coef.T
    g = (coef.sum(axis=1)[:, None] * hf - coef @ hf) / n_pairs
    return float(loss), g.reshape(h.shape).astype(h.dtype)
