"""Experiment configuration: one JSON document, every field defaulted."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .baselines import GradientAttackConfig
from .meta_attack import AttackConfig
from .victims import DEFAULT_ARCHS


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    n_identities: int = Field(20, ge=2)
    images_per_identity: int = Field(10, ge=2)
    makeup_identities: int = Field(10, ge=1)
    makeup_images_per_identity: int = Field(4, ge=1)
    seed: int | None = None          # None: use the experiment seed


class VictimArchConfig(_Strict):
    name: str
    widths: tuple[int, ...]
    embed_dim: int = Field(ge=2)
    input_size: tuple[int, int]
    kind: Literal["plain", "separable"] = "plain"
    kernel: int = Field(3, ge=1)


class VictimsConfig(_Strict):
    architectures: list[VictimArchConfig] = Field(
        default_factory=lambda: [VictimArchConfig(**a.to_dict()) for a in DEFAULT_ARCHS])
    min_separation: float = 0.3
    min_epochs: int = Field(25, ge=1)
    max_epochs: int = Field(80, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(2e-3, gt=0)
    far: float = Field(0.01, gt=0, lt=1)
    seed: int | None = None


class ModelConfig(_Strict):
    patch_shape: tuple[int, int] = (16, 48)
    patch_center: tuple[float, float] = (26.0, 32.0)   # (row, col) in the aligned frame
    generator_width: int = Field(8, ge=1)
    generator_depth: int = Field(3, ge=1)
    condition_on_target: bool = True
    discriminator_width: int = Field(16, ge=1)
    discriminator_layers: int = Field(3, ge=1)
    extractor_seed: int = 0
    extractor_widths: tuple[int, ...] = (8, 16, 32)


def _toy_attack() -> AttackConfig:
    return AttackConfig(batch_size=4, lr=0.01, style_normalization="gatys")


class EvalConfig(_Strict):
    n_targets: int = Field(10, ge=1)                   # first image of identities 0..n_targets-1
    source_identities: tuple[int, int] | None = None   # [lo, hi) identity range; None: the rest
    holdouts: list[str] | None = None                  # None: every victim in turn
    tau_grid: tuple[float, float, int] = (-1.0, 1.0, 201)
    save_png_limit: int = Field(20, ge=0)              # PNGs written per method and holdout


class ExperimentConfig(_Strict):
    seed: int = 0
    data: DataConfig = Field(default_factory=DataConfig)
    victims: VictimsConfig = Field(default_factory=VictimsConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    attack: AttackConfig = Field(default_factory=_toy_attack)
    baseline: GradientAttackConfig = Field(default_factory=GradientAttackConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _check(self):
        if self.eval.n_targets > self.data.n_identities:
            raise ValueError("more targets than identities")
        names = [a.name for a in self.victims.architectures]
        if len(set(names)) != len(names):
            raise ValueError("victim names must be unique")
        for h in self.eval.holdouts or []:
            if h not in names:
                raise ValueError(f"holdout {h!r} is not a configured victim")
        return self

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    @property
    def victim_seed(self) -> int:
        return self.seed if self.victims.seed is None else self.victims.seed

    def resolved(self) -> dict:
        return self.model_dump(mode="json")


def load_config(path=None, seed: int | None = None) -> ExperimentConfig:
    """Read and validate a JSON config; ``seed`` overrides the file's seed."""
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"missing config file: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {p} is not valid JSON: {e}") from None
    if seed is not None:
        doc["seed"] = seed
    try:
        cfg = ExperimentConfig.model_validate(doc)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(x) for x in first["loc"]) or "<root>"
        raise ConfigError(f"config field {loc}: {first['msg']} ({e.error_count()} error(s))") from None
    # the attack seed follows the experiment seed unless set explicitly
    if "seed" not in doc.get("attack", {}):
        cfg.attack.seed = cfg.seed
    return cfg
