"""Shared attack plumbing: config/result records, the match loss, l1-ball projection."""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from splitlab import nn

# default TV weights per attack family
DEFAULT_ALPHA = {"rmle": 2.0, "lm": 1.5, "gan": 0.01}


class AttackDiverged(FloatingPointError):
    def __init__(self, what: str, step: int, trace, stage: int | None = None):
        where = f" stage {stage}" if stage is not None else ""
        super().__init__(f"{what}{where}: non-finite loss at iteration {step}")
        self.stage = stage
        self.step = step
        self.trace = [np.asarray(t) for t in trace]


class TargetModified(RuntimeError):
    """An attack changed parameters of a model it only had read access to."""


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters shared by the optimization attacks.

    ``iterations`` is N: pixel-attack steps and PFO steps per stage.
    ``w_iterations`` and ``select_iterations`` default to N. ``alpha=None``
    picks the attack's default TV weight. Ball radii are
    ``radius_frac * ||center||_1`` per stage unless ``radii`` gives absolute
    values (then the same r[i] bounds both hf_i and w_i; ``inf`` disables
    a ball).
    """

    iterations: int = 500
    lr: float = 1e-2
    alpha: float | None = None
    kl_weight: float = 0.05
    manifold_weight: float = 1.0
    candidates: int = 32
    select_iterations: int | None = None
    w_iterations: int | None = None
    radius_frac: float = 0.1
    radii: tuple[float, ...] | None = None
    mode: str = "whitebox"
    seed: int = 0
    # black-box only
    query_budget: int = 2000
    code_dim: int = 32
    popsize: int | None = None
    sigma_w: float = 0.3
    sigma_code: float = 0.3
    tv_reduction: str = "mean"

    def __post_init__(self):
        if self.iterations < 0 or (self.select_iterations or 0) < 0 or (self.w_iterations or 0) < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.candidates < 1:
            raise ValueError("candidate count must be at least 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        weights = (self.alpha or 0.0, self.kl_weight, self.manifold_weight, self.radius_frac)
        if any(v < 0 for v in weights):
            raise ValueError("weights and radius fraction must be non-negative")
        if self.radii is not None and any(r < 0 for r in self.radii):
            raise ValueError("radii must be non-negative")
        if self.tv_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown TV reduction {self.tv_reduction!r}")
        if self.mode not in ("whitebox", "blackbox"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.query_budget < 1 or self.code_dim < 1:
            raise ValueError("query budget and code dimension must be positive")

    @property
    def n_select(self) -> int:
        return self.iterations if self.select_iterations is None else self.select_iterations

    @property
    def n_w(self) -> int:
        return self.iterations if self.w_iterations is None else self.w_iterations

    def tv_weight(self, family: str, numel: int = 1) -> float:
        """Coefficient on the summed TV of one image of ``numel`` values.

        With ``tv_reduction="mean"`` alpha weighs TV per image element, the
        same normalization as the mean-squared match loss.
        """
        alpha = DEFAULT_ALPHA[family] if self.alpha is None else self.alpha
        return alpha / numel if self.tv_reduction == "mean" else alpha

    def with_(self, **changes) -> "AttackConfig":
        return AttackConfig(**{**asdict(self), **changes})

    def echo(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    """Reconstruction for a batch of T targets.

    ``traces`` maps a stage name to a ``(n_iter + 1, T)`` array of match
    losses, row 0 being the stage's starting point; ``best_traces`` holds
    the running minimum of each. ``final_loss`` is the match loss of the
    returned images.
    """

    attack: str
    images: np.ndarray
    final_loss: np.ndarray
    traces: dict = field(default_factory=dict)
    best_traces: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    budget_exhausted: bool = False
    queries: int = 0


def per_target_mse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise nn.ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    d = (a - b).reshape(a.shape[0], -1).astype(np.float64)
    return (d * d).mean(axis=1)


def match_loss(h_rec: np.ndarray, h_tar: np.ndarray) -> float:
    """Mean squared difference between two representations."""
    h_rec, h_tar = np.asarray(h_rec), np.asarray(h_tar)
    if h_rec.shape != h_tar.shape:
        raise nn.ShapeError(f"shape mismatch {h_rec.shape} vs {h_tar.shape}")
    d = (h_rec - h_tar).astype(np.float64)
    return float((d * d).mean())


def match_loss_grad(h_rec: np.ndarray, h_tar: np.ndarray) -> np.ndarray:
    """Gradient of the per-target mean squared difference, summed over targets."""
    per = int(np.prod(h_rec.shape[1:]))
    return (2.0 / per) * (h_rec - h_tar)


def _l1_shrink_rows(d: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Project each row of ``d`` onto the l1 ball of its radius (sort-and-threshold)."""
    u = np.abs(d)
    s = np.sort(u, axis=1)[:, ::-1]
    cs = np.cumsum(s, axis=1)
    j = np.arange(1, d.shape[1] + 1)
    cond = s - (cs - radii[:, None]) / j > 0
    rho = d.shape[1] - np.argmax(cond[:, ::-1], axis=1)
    theta = (cs[np.arange(len(d)), rho - 1] - radii) / rho
    return np.sign(d) * np.maximum(u - theta[:, None], 0.0)


def project_l1_ball_rows(v: np.ndarray, center: np.ndarray, radii) -> np.ndarray:
    """Row-wise Euclidean projection of ``v`` onto ``{u: ||u - c||_1 <= r}``.

    ``v`` and ``center`` are ``(T, ...)``; ``radii`` is a scalar or one
    radius per row. Radius 0 returns the center exactly and ``inf`` leaves
    the row untouched. The result, stored in ``v``'s dtype, satisfies the
    constraint when measured in float64.
    """
    if v.shape != center.shape:
        raise nn.ShapeError(f"projection shapes differ: {v.shape} vs {center.shape}")
    t = v.shape[0]
    radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), (t,))
    if np.any(radii < 0) or np.any(np.isnan(radii)):
        raise ValueError("radius must be non-negative")
    vf = v.reshape(t, -1)
    cf = center.reshape(t, -1)
    out = vf.copy()
    d = vf.astype(np.float64) - cf
    norms = np.abs(d).sum(axis=1)
    zero = radii == 0
    out[zero] = cf[zero]
    active = ~zero & (norms > radii)
    if np.any(active):
        idx = np.flatnonzero(active)
        r = radii[idx]
        dp = _l1_shrink_rows(d[idx], r)
        cen = cf[idx]
        rows = (cen + dp).astype(v.dtype)
        slack = 4.0 * float(np.finfo(v.dtype).eps) if v.dtype.kind == "f" else 1e-7
        # rounding when storing in a narrower dtype can push a row just outside
        for _ in range(30):
            excess = np.abs(rows.astype(np.float64) - cen).sum(axis=1) - r
            bad = excess > 0
            if not np.any(bad):
                break
            scale = 1.0 - 2.0 * excess[bad] / np.maximum(np.abs(dp[bad]).sum(axis=1), 1e-300) - slack
            dp[bad] *= np.maximum(scale, 0.0)[:, None]
            rows[bad] = (cen[bad] + dp[bad]).astype(v.dtype)
        else:
            rows[bad] = cen[bad]
        out[idx] = rows
    return out.reshape(v.shape)


def project_l1_ball(v: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto the l1 ball of ``radius`` around ``center``."""
    v = np.asarray(v)
    center = np.asarray(center, dtype=v.dtype)
    if radius < 0 or math.isnan(radius):
        raise ValueError("radius must be non-negative")
    if v.shape != center.shape:
        raise nn.ShapeError(f"projection shapes differ: {v.shape} vs {center.shape}")
    return project_l1_ball_rows(v.reshape(1, -1), center.reshape(1, -1), radius).reshape(v.shape)


def l1_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row l1 distance, computed in float64."""
    return np.abs(a.reshape(a.shape[0], -1).astype(np.float64) - b.reshape(b.shape[0], -1)).sum(axis=1)


@contextlib.contextmanager
def read_only(*models):
    """Assert that the given models' parameters are unchanged on exit."""
    before = nn.param_checksum(*models)
    yield
    if nn.param_checksum(*models) != before:
        raise TargetModified("attack modified model parameters")


class BestTracker:
    """Per-target best iterate by match loss; the first of equal losses is kept."""

    def __init__(self, n: int):
        self.loss = np.full(n, np.inf)
        self.items: dict[str, np.ndarray] = {}

    def update(self, loss: np.ndarray, **items) -> np.ndarray:
        better = loss < self.loss
        if not self.items:
            self.items = {k: np.array(v, copy=True) for k, v in items.items()}
        elif np.any(better):
            for k, v in items.items():
                self.items[k][better] = v[better]
        self.loss = np.where(better, loss, self.loss)
        return better

    def __getitem__(self, key):
        return self.items[key]


def ensure_batch(h_tar: np.ndarray, expected: tuple) -> np.ndarray:
    """Accept one representation or a batch; always return a batch."""
    h_tar = np.asarray(h_tar)
    if h_tar.shape == tuple(expected):
        return h_tar[None]
    if h_tar.shape[1:] != tuple(expected):
        raise nn.ShapeError(f"target representation shape {h_tar.shape[1:]} != model output {tuple(expected)}")
    return h_tar


def check_finite(loss, what, step, trace, stage=None):
    if not np.all(np.isfinite(loss)):
        raise AttackDiverged(what, step, trace, stage)
