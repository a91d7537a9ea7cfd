"""Experiment orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from splitlab.attacks import (
    AttackConfig,
    QueryOracle,
    attack_in,
    attack_latent_only,
    attack_lm,
    attack_pfo_blackbox,
    attack_rmle,
    pfo_progressive,
)
from splitlab.defenses import DefenseConfig
from splitlab.metrics import EvalReport, evaluate_attack

# ablation arms, named after what each keeps
ABLATION_ARMS = ("latent-only", "pfo-noball", "pfo")


@dataclass
class Zoo:
    target: object
    gen: object = None
    ae: object = None
    inverse: dict = field(default_factory=dict)


def attack_config(section, seed: int) -> AttackConfig:
    """Build an AttackConfig from a config section (pydantic model or dict)."""
    values = section.model_dump() if hasattr(section, "model_dump") else dict(section)
    if values.get("radii") is not None:
        values["radii"] = tuple(values["radii"])
    return AttackConfig(seed=seed, **values)


class PfoCache:
    """Runs selection + w optimization once per (representation, seed) and derives every GAN arm."""

    def __init__(self, zoo: Zoo, split: int, cfg: AttackConfig):
        self.zoo, self.split, self.cfg = zoo, split, cfg
        self._memo = {}

    def _key(self, h, seed):
        return seed, hashlib.sha1(np.ascontiguousarray(h).tobytes()).hexdigest(), h.shape

    def arm(self, h, seed, name: str) -> np.ndarray:
        key = self._key(h, seed)
        client = self.zoo.target.client(self.split)
        cfg = self.cfg.with_(seed=seed)
        slot = self._memo.get(key)
        if slot is None:
            lat = attack_latent_only(h, client, self.zoo.gen, cfg)
            slot = self._memo[key] = {"latent-only": lat.images, "w0": lat.extras["w"]}
        if name not in slot:
            radii = (math.inf,) if name == "pfo-noball" else cfg.radii
            slot[name] = pfo_progressive(slot["w0"], h, client, self.zoo.gen, cfg.with_(radii=radii)).images
        return slot[name]

    def fn(self, arm: str):
        return lambda h, seed: self.arm(h, seed, arm)


def attack_fn(name: str, zoo: Zoo, split: int, cfg: AttackConfig, cache: PfoCache | None = None):
    """``f(h_batch, seed) -> images`` for one attack at one split point."""
    client = zoo.target.client(split)
    if name == "rmle":
        return lambda h, seed: attack_rmle(h, client, cfg.with_(seed=seed)).images
    if name == "lm":
        return lambda h, seed: attack_lm(h, client, zoo.ae, cfg.with_(seed=seed)).images
    if name == "in":
        inv = zoo.inverse[split]
        return lambda h, seed: attack_in(h, inv).images
    if name in ABLATION_ARMS:
        return (cache or PfoCache(zoo, split, cfg)).fn(name)
    if name == "pfo-blackbox":
        def run(h, seed):
            out = []
            for i in range(len(h)):
                oracle = QueryOracle(client, cfg.query_budget)
                out.append(attack_pfo_blackbox(h[i:i + 1], oracle, zoo.gen, cfg.with_(seed=seed + 1000 * i)).images)
            return np.concatenate(out)
        return run
    raise ValueError(f"unknown attack {name!r}")


def run_evaluation(zoo: Zoo, targets: np.ndarray, attacks, split_points, cfg: AttackConfig,
                   defense: DefenseConfig | None = None, seeds=(0,), names=None) -> EvalReport:
    """One row per (attack, split point); GAN arms at a split share one pipeline run."""
    report = EvalReport()
    for split in split_points:
        cache = PfoCache(zoo, split, cfg)
        client = zoo.target.client(split)
        for name in attacks:
            fn = attack_fn(name, zoo, split, cfg, cache)
            label = (names or {}).get(name, name)
            report.add(evaluate_attack(fn, targets, client, name=label, split=split, defense=defense, seeds=seeds))
    return report


def run_ablation(zoo: Zoo, targets, split_points, cfg: AttackConfig, defense=None, seeds=(0,)) -> EvalReport:
    """The three arms: without feature stages, stages without l1 balls, full PFO."""
    return run_evaluation(zoo, targets, ABLATION_ARMS, split_points, cfg, defense, seeds)
