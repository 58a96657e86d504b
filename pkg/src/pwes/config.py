"""Run configuration."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .dfcl import DEFAULT_REGIONS
from .errors import ConfigurationError
from .mplg import MplgConfig
from .network import config_hash
from .objectives import LossWeights
from .proposals import DEFAULT_RATIOS


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    manifest: str | None = None
    test_subject: str | None = None

    emb_dim: int = Field(32, ge=1)
    tcam_activation: Literal["sigmoid", "softmax"] = "sigmoid"
    k_mil_ratio: float = Field(0.125, gt=0, le=1)

    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(1.0, ge=0)
    lambda3: float = Field(0.1, ge=0)
    lambda4: float = Field(1.0, ge=0)
    lambda5: float = Field(0.8, ge=0)

    k_ratio: float = Field(0.3, gt=0, le=0.3)
    theta: float = Field(0.8, gt=0, lt=1)
    class_weighting: Literal["distance", "similarity"] = "distance"
    tau: float = Field(1.0, gt=0)
    regions: list[int] = Field(default_factory=lambda: list(DEFAULT_REGIONS))

    use_mplg: bool = True
    use_dfcl: bool = True
    mplg_every: int = Field(1, ge=1)

    top_ratios: list[float] = Field(default_factory=lambda: list(DEFAULT_RATIOS))
    top_values: list[int] | None = None
    oic_inflation: float = Field(0.25, ge=0)
    nms_threshold: float = Field(0.01, ge=0, le=1)
    k_eval: float = Field(0.5, gt=0, le=1)

    pretrain_iters: int = Field(80, ge=0)
    total_iters: int = Field(1000, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(0.0005, gt=0)
    seed: int = 0
    supervision: Literal["random", "apex"] = "random"

    synth: dict | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.pretrain_iters >= self.total_iters:
            raise ValueError(f"pretrain_iters ({self.pretrain_iters}) must be < total_iters ({self.total_iters})")
        if any(k < 1 for k in self.regions):
            raise ValueError("region counts must be >= 1")
        return self

    @classmethod
    def preset(cls, name: str, **overrides) -> "RunConfig":
        """Published settings for the real datasets ('casme2', 'casme3', 'samm')."""
        presets = {
            "casme2": dict(pretrain_iters=80, lr=0.0005, theta=0.8, regions=[2, 3, 10]),
            "casme3": dict(pretrain_iters=80, lr=0.0005, theta=0.8, regions=[2, 3, 10]),
            "samm": dict(pretrain_iters=50, lr=0.0008, theta=0.9, regions=[2, 3, 8]),
        }
        if name not in presets:
            raise ConfigurationError(f"unknown preset {name!r}")
        return cls(**{**presets[name], **overrides})

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls(**json.loads(Path(path).read_text()))

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)

    @property
    def mplg_config(self) -> MplgConfig:
        return MplgConfig(k_ratio=self.k_ratio, theta=self.theta, weighting=self.class_weighting)

    def top_set(self, T: int) -> list[int]:
        from .proposals import default_top_set

        if self.top_values is not None:
            return [min(T, max(1, k)) for k in self.top_values]
        return default_top_set(T, self.top_ratios)

    def training_dict(self) -> dict:
        """Fields that influence the trained weights (excludes paths and eval-only settings)."""
        skip = {"manifest", "synth", "top_ratios", "top_values", "oic_inflation", "nms_threshold", "k_eval"}
        return {k: v for k, v in self.model_dump().items() if k not in skip}

    @property
    def hash(self) -> str:
        return config_hash(self.training_dict())
