"""Experiment configuration: a TOML file validated against a strict schema.

Unknown keys are rejected everywhere. ``--set a.b=value`` overrides parse
``value`` as a TOML literal when possible and as a bare string otherwise.
"""

from __future__ import annotations

import math
import sys
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

ATTACK_NAMES = ("rmle", "lm", "in", "latent-only", "pfo", "pfo-blackbox")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CorpusSection(_Strict):
    n_private: int = Field(8000, ge=10)
    n_public: int = Field(4000, ge=10)
    size: int = Field(16, ge=8)
    ood: bool = False


class DefenseSection(_Strict):
    kind: Literal["none", "noise", "prune", "nopeek", "siamese"] = "none"
    b: float = Field(1.0, ge=0)
    ratio: float = Field(0.1, ge=0, le=1)
    lambda2: float = Field(5.0, ge=0)
    lambda3: float = Field(0.005, ge=0)
    margin: float = Field(1.0, gt=0)


class TargetSection(_Strict):
    epochs: int = Field(15, ge=1)
    lr: float = Field(3e-3, gt=0)
    batch_size: int = Field(64, ge=1)
    widths: list[int] = [8, 12, 16, 16, 32]
    defense: DefenseSection = DefenseSection()

    @field_validator("widths")
    @classmethod
    def _five(cls, v):
        if len(v) != 5 or min(v) < 1:
            raise ValueError("widths needs five positive channel counts")
        return v


class GanSection(_Strict):
    steps: int = Field(3000, ge=1)
    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.99, ge=0, lt=1)
    batch_size: int = Field(32, ge=2)
    channels: list[int] = [32, 32, 16, 16]
    z_dim: int = Field(32, ge=1)
    w_dim: int = Field(32, ge=1)


class DecoderSection(_Strict):
    epochs: int = Field(30, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(64, ge=1)
    width: int = Field(32, ge=1)


class AttackSection(_Strict):
    iterations: int = Field(500, ge=0)
    lr: float = Field(1e-2, gt=0)
    alpha: float | None = Field(None, ge=0)
    kl_weight: float = Field(0.05, ge=0)
    manifold_weight: float = Field(1.0, ge=0)
    candidates: int = Field(32, ge=1)
    select_iterations: int | None = Field(None, ge=0)
    w_iterations: int | None = Field(None, ge=0)
    radius_frac: float = Field(0.1, ge=0)
    radii: list[float] | None = None
    query_budget: int = Field(2000, ge=1)
    code_dim: int = Field(32, ge=1)
    tv_reduction: Literal["mean", "sum"] = "mean"

    @field_validator("radii")
    @classmethod
    def _nonneg(cls, v):
        if v is not None and any(r < 0 or math.isnan(r) for r in v):
            raise ValueError("radii must be non-negative")
        return v


class ServerSection(_Strict):
    listen: str = "127.0.0.1:5055"


class ExperimentConfig(_Strict):
    seed: int = 0
    out_dir: str = "runs/default"
    split_point: Literal[1, 2, 3] = 1
    split_points: list[Literal[1, 2, 3]] = [1, 2, 3]
    attacks: list[str] = ["rmle", "lm", "in", "latent-only", "pfo"]
    metrics: list[Literal["psnr", "mse", "ssim"]] = ["psnr", "mse", "ssim"]
    n_targets: int = Field(16, ge=1)
    seeds: list[int] = [0, 1, 2]
    corpus: CorpusSection = CorpusSection()
    target: TargetSection = TargetSection()
    gan: GanSection = GanSection()
    autoencoder: DecoderSection = DecoderSection()
    inverse: DecoderSection = DecoderSection()
    defense: DefenseSection = DefenseSection()
    attack: AttackSection = AttackSection()
    server: ServerSection = ServerSection()

    @field_validator("attacks")
    @classmethod
    def _known(cls, v):
        bad = [a for a in v if a not in ATTACK_NAMES]
        if bad:
            raise ValueError(f"unknown attack(s) {bad}; choose from {list(ATTACK_NAMES)}")
        return v


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _literal(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(tree: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(key, "cannot set a field inside a non-table value")
    node[parts[-1]] = _literal(value.strip())


def load_config(path=None, overrides=()) -> ExperimentConfig:
    tree = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                tree = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"not valid TOML: {exc}") from exc
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read config: {exc}") from exc
    for item in overrides:
        apply_override(tree, item)
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(".".join(str(p) for p in err["loc"]) or "<root>", err["msg"]) from exc
