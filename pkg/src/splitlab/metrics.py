"""Reconstruction-quality metrics and the batch evaluation harness."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from splitlab.defenses import DefenseConfig, apply_wire_defense

log = logging.getLogger(__name__)

CSV_HEADER = ("attack", "split", "defense", "psnr", "mse", "ssim", "n", "seed")
SSIM_WINDOW = 7
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def _gray(x):
    return x.mean(axis=0) if x.ndim == 3 else x


def ssim(a, b, peak: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity over all valid ``window x window`` positions.

    Colour images are reduced to gray by the channel mean; window statistics
    are uniform-weight with population (co)variances.
    """
    a, b = _pair(a, b)
    a, b = _gray(a), _gray(b)
    if a.ndim != 2:
        raise ValueError("ssim expects (H, W) or (C, H, W) images")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a, mu_b = wa.mean(axis=(-1, -2)), wb.mean(axis=(-1, -2))
    var_a = (wa * wa).mean(axis=(-1, -2)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-1, -2)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def image_metrics(recon: np.ndarray, truth: np.ndarray, peak: float = 1.0) -> dict:
    """Per-image metric arrays for two ``(N, C, H, W)`` batches."""
    if recon.shape != truth.shape:
        raise ValueError(f"batch shapes differ: {recon.shape} vs {truth.shape}")
    return {
        "psnr": np.array([psnr(r, t, peak) for r, t in zip(recon, truth)]),
        "mse": np.array([mse(r, t) for r, t in zip(recon, truth)]),
        "ssim": np.array([ssim(r, t, peak) for r, t in zip(recon, truth)]),
    }


@dataclass
class EvalRow:
    attack: str
    split: int
    defense: str
    psnr: float
    mse: float
    ssim: float
    n: int
    seed: str
    failed: int = 0
    per_image: dict = field(default_factory=dict, repr=False)

    def csv_fields(self):
        return [self.attack, str(self.split), self.defense, _fmt(self.psnr), _fmt(self.mse),
                _fmt(self.ssim), str(self.n), self.seed]


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return repr(float(v))


def _parse(v: str) -> float:
    return float(v)  # float() already accepts "inf" and "nan"


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def add(self, row: EvalRow):
        self.rows.append(row)

    def extend(self, other: "EvalReport"):
        self.rows.extend(other.rows)

    def sorted(self) -> "EvalReport":
        return EvalReport(sorted(self.rows, key=lambda r: (r.split, r.defense, r.attack)))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for row in self.rows:
                w.writerow(row.csv_fields())

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise ValueError(f"unexpected CSV header {header}")
            rows = [EvalRow(r[0], int(r[1]), r[2], _parse(r[3]), _parse(r[4]), _parse(r[5]), int(r[6]), r[7])
                    for r in reader]
        return cls(rows)

    def lookup(self, attack: str, split: int, defense: str = "none") -> EvalRow:
        for row in self.rows:
            if (row.attack, row.split, row.defense) == (attack, split, defense):
                return row
        raise KeyError((attack, split, defense))


def _run_guarded(attack, h, seed):
    """Run on the whole batch; if that fails, isolate failing targets one by one."""
    n = len(h)
    try:
        images = np.asarray(attack(h, seed))
        ok = np.all(np.isfinite(images.reshape(n, -1)), axis=1)
        return images, ok
    except Exception as exc:  # fall back to per-target runs
        log.warning("attack failed on batch (%s); retrying per target", exc)
    images, ok = [], np.ones(n, dtype=bool)
    for i in range(n):
        try:
            img = np.asarray(attack(h[i:i + 1], seed))[0]
            ok[i] = bool(np.all(np.isfinite(img)))
        except Exception as exc:
            log.warning("attack failed on target %d: %s", i, exc)
            img, ok[i] = None, False
        images.append(img)
    shape = next((im.shape for im in images if im is not None), None)
    if shape is None:
        return None, ok
    return np.stack([im if im is not None else np.full(shape, np.nan) for im in images]), ok


def evaluate_attack(attack, targets: np.ndarray, client, *, name: str, split: int,
                    defense: DefenseConfig | None = None, seeds=(0,), peak: float = 1.0,
                    representations=None) -> EvalRow:
    """Run ``attack(h_batch, seed) -> images`` against every target for every seed.

    ``h`` is ``client(targets)`` passed through the wire-boundary defense
    (noise seeded per run seed). Metrics are averaged over all successful
    (target, seed) runs; failed runs are excluded and counted. ``client``
    may be None when ``representations`` (one batch per seed) are given.
    """
    targets = np.asarray(targets)
    if len(targets) < 1:
        raise ValueError("need at least one target")
    per = {"psnr": [], "mse": [], "ssim": []}
    failed = 0
    for k, seed in enumerate(seeds):
        if representations is not None:
            h = representations[k]
        else:
            h = apply_wire_defense(client(targets), defense, seed=seed)
        images, ok = _run_guarded(attack, h, seed)
        failed += int((~ok).sum())
        if images is None or not ok.any():
            continue
        m = image_metrics(np.clip(images[ok], 0.0, 1.0), targets[ok], peak)
        for key in per:
            per[key].extend(m[key].tolist())
    n = len(per["psnr"])
    means = {k: float(np.mean(v)) if v else math.nan for k, v in per.items()}
    label = defense.label() if defense is not None else "none"
    if failed:
        log.warning("%s at split %d: %d failed run(s) excluded", name, split, failed)
    return EvalRow(name, split, label, means["psnr"], means["mse"], means["ssim"], n,
                   ";".join(str(s) for s in seeds), failed, {k: np.array(v) for k, v in per.items()})
