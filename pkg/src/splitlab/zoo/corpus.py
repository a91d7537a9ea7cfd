"""Procedural colored-shape images standing in for private/public face data."""

from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass, field

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class FactorRanges:
    hue: tuple[float, float] = (0.0, 1.0)
    scale: tuple[float, float] = (3.0, 5.5)


# OOD mode: public prior data and private data use disjoint hue and scale bands.
PUBLIC_OOD = FactorRanges(hue=(0.0, 0.5), scale=(3.0, 4.5))
PRIVATE_OOD = FactorRanges(hue=(0.5, 1.0), scale=(4.5, 5.5))


@dataclass
class SyntheticCorpus:
    private_images: np.ndarray
    private_labels: np.ndarray
    public_images: np.ndarray
    public_labels: np.ndarray
    size: int
    ood: bool
    seed: int
    private_factors: dict = field(default_factory=dict, repr=False)
    public_factors: dict = field(default_factory=dict, repr=False)

    @property
    def n_classes(self) -> int:
        return len(SHAPES)

    def private_split(self, holdout: float = 0.2):
        """(train_x, train_y, test_x, test_y) split of the private set."""
        n_test = int(round(len(self.private_images) * holdout))
        n_train = len(self.private_images) - n_test
        return (self.private_images[:n_train], self.private_labels[:n_train],
                self.private_images[n_train:], self.private_labels[n_train:])


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def _shape_mask(kind, u, v, scale):
    if kind == 0:
        return u * u + v * v <= scale * scale
    if kind == 1:
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8 * scale
    if kind == 2:
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = np.pi / 2 + 2 * np.pi * k / 3
            inside &= u * np.cos(a) + v * np.sin(a) <= 0.5 * scale
        return inside
    arm = 0.3 * scale
    return ((np.abs(u) <= arm) & (np.abs(v) <= scale)) | ((np.abs(v) <= arm) & (np.abs(u) <= scale))


def render(kind: int, cx: float, cy: float, scale: float, angle: float, hue: float,
           bg_hues: tuple[float, float], bg_angle: float, size: int = 16) -> np.ndarray:
    """Render one (3, size, size) image in [0, 1] with 4x supersampling."""
    n = size * SUPERSAMPLE
    grid = (np.arange(n) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    mask = _shape_mask(kind, u, v, scale)[None]

    t = ((xx - size / 2) * np.cos(bg_angle) + (yy - size / 2) * np.sin(bg_angle)) / size + 0.5
    t = np.clip(t, 0, 1)[None]
    c0 = _hsv(bg_hues[0], 0.35, 0.45)[:, None, None]
    c1 = _hsv(bg_hues[1], 0.35, 0.75)[:, None, None]
    bg = c0 * (1 - t) + c1 * t
    fg = _hsv(hue, 0.85, 0.95)[:, None, None]
    img = np.where(mask, fg, bg)
    img = img.reshape(3, size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(2, 4))
    return img.astype(np.float32)


def sample_factors(rng: np.random.Generator, n: int, ranges: FactorRanges, size: int = 16) -> dict:
    return {
        "kind": rng.integers(0, len(SHAPES), n),
        "cx": rng.uniform(0.35 * size, 0.65 * size, n),
        "cy": rng.uniform(0.35 * size, 0.65 * size, n),
        "scale": rng.uniform(*ranges.scale, n) * size / 16,
        "angle": rng.uniform(0, 2 * np.pi, n),
        "hue": rng.uniform(*ranges.hue, n),
        "bg_hue0": rng.uniform(0, 1, n),
        "bg_hue1": rng.uniform(0, 1, n),
        "bg_angle": rng.uniform(0, 2 * np.pi, n),
    }


def render_factors(f: dict, size: int = 16) -> np.ndarray:
    n = len(f["kind"])
    out = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        out[i] = render(int(f["kind"][i]), f["cx"][i], f["cy"][i], f["scale"][i], f["angle"][i],
                        f["hue"][i], (f["bg_hue0"][i], f["bg_hue1"][i]), f["bg_angle"][i], size)
    return out


def _digests(images):
    return {hashlib.sha1(img.tobytes()).hexdigest() for img in images}


def make_corpus(n_private: int = 1200, n_public: int = 1200, size: int = 16, ood: bool = False,
                seed: int = 0) -> SyntheticCorpus:
    """Build disjoint private (D_P) and public (D_A) sets.

    Without ``ood`` both sets share factor ranges and are drawn from
    independent streams; disjointness is then checked sample-by-sample.
    """
    ss = np.random.SeedSequence(seed)
    rng_p, rng_a = (np.random.default_rng(s) for s in ss.spawn(2))
    priv_ranges, pub_ranges = (PRIVATE_OOD, PUBLIC_OOD) if ood else (FactorRanges(), FactorRanges())
    fp = sample_factors(rng_p, n_private, priv_ranges, size)
    fa = sample_factors(rng_a, n_public, pub_ranges, size)
    xp, xa = render_factors(fp, size), render_factors(fa, size)
    if _digests(xp) & _digests(xa):
        raise RuntimeError("private and public sets overlap")
    return SyntheticCorpus(xp, fp["kind"].astype(np.int64), xa, fa["kind"].astype(np.int64),
                           size=size, ood=ood, seed=seed, private_factors=fp, public_factors=fa)
