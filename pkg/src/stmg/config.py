"""Experiment configuration: a single JSON document with validated defaults.

Every run embeds its resolved config verbatim in its outputs; checkpoints
carry the config hash so evaluation can detect architecture mismatches.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .backbone import BackboneConfig
from .maskgen import MaskGeneratorConfig


class ConfigError(ValueError):
    """Raised for semantically invalid or mismatched configurations."""


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    num_frames: int = Field(96, ge=2)
    num_objects: int = Field(3, ge=0)
    speed: float = Field(4.0, ge=0)
    height: int = Field(64, gt=0)
    width: int = Field(64, gt=0)
    num_classes: int = Field(4, ge=2)
    channels: int = Field(3, gt=0)
    num_sequences: int = Field(8, ge=1)  # training draws pairs across this many scenes


class BackboneSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layers: list[tuple[int, int]] = [(3, 16), (4, 32)]
    feature_stride: int = Field(8, ge=2)
    bn_momentum: float = Field(0.1, gt=0, lt=1)


class MaskGenSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    feature_channels: int = Field(16, ge=1)
    hidden_channels: int = Field(16, ge=1)
    tau: float = Field(1e-10, gt=0, lt=0.5)
    rho: float = Field(1.0, gt=0)
    beta_prior: float = -1.0
    temperature: float = Field(0.1, gt=0)
    stat_momentum: float = Field(0.1, gt=0, le=1)
    beta_init: float = 0.15
    noise_scale_init: float = Field(0.1, gt=0)
    phi_polarity: Literal["keep", "drop"] = "keep"
    dbb_bias: bool = False
    # resolution of the oracle distortion map the spatial mask is distilled
    # against: "input" supervises each feature bin with the fraction of
    # changed pixels; "feature" uses the majority-vote binary map
    teacher_resolution: Literal["input", "feature"] = "input"


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: float = Field(1.0, ge=0)
    kl: float = Field(1e-4, ge=0)
    recon: float = Field(1.0, ge=0)


class TrainingSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(3500, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(0.03, gt=0)
    lr_schedule: Literal["constant", "cosine"] = "cosine"  # cosine decays to lr/10
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    freeze_key: bool = True
    # fraction of steps that train the full-network key path (mask of ones,
    # no aggregation), interleaved deterministically
    key_step_fraction: float = Field(0.25, ge=0, le=1)
    log_every: int = Field(1, ge=1)


class PolicySettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["distortion_aware", "fixed", "always_full", "per_frame_pruning"] = "distortion_aware"
    gamma1: float = Field(2.0, gt=1)
    gamma2: float = Field(0.95, gt=0, le=1)
    refresh_period: int = Field(2, ge=1)


class AggregationSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["stmg", "fixed", "uniform", "random"] = "stmg"
    fixed_value: float = Field(0.8, ge=0, le=1)


class EvalSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 1000  # held-out sequence seed
    num_frames: int = Field(80, ge=2)
    dump_masks: bool = True
    random_agg_seed: int = 0


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    dataset: DatasetConfig = DatasetConfig()
    backbone: BackboneSettings = BackboneSettings()
    maskgen: MaskGenSettings = MaskGenSettings()
    loss_weights: LossWeights = LossWeights()
    training: TrainingSettings = TrainingSettings()
    policy: PolicySettings = PolicySettings()
    aggregation: AggregationSettings = AggregationSettings()
    eval: EvalSettings = EvalSettings()
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        self.backbone_config()  # raises on invalid layer/stride combinations
        return self

    def backbone_config(self) -> BackboneConfig:
        try:
            return BackboneConfig(
                layers=tuple(tuple(l) for l in self.backbone.layers),
                input_channels=self.dataset.channels,
                num_classes=self.dataset.num_classes,
                feature_stride=self.backbone.feature_stride,
                bn_momentum=self.backbone.bn_momentum,
            )
        except ValueError as e:
            raise ConfigError(f"backbone: {e}") from e

    def maskgen_config(self) -> MaskGeneratorConfig:
        return MaskGeneratorConfig(
            num_blocks=self.backbone_config().num_prunable,
            input_channels=self.dataset.channels,
            feature_stride=self.backbone.feature_stride,
            feature_channels=self.maskgen.feature_channels,
            hidden_channels=self.maskgen.hidden_channels,
            tau=self.maskgen.tau,
            rho=self.maskgen.rho,
            beta_prior=self.maskgen.beta_prior,
            temperature=self.maskgen.temperature,
            stat_momentum=self.maskgen.stat_momentum,
            beta_init=self.maskgen.beta_init,
            noise_scale_init=self.maskgen.noise_scale_init,
            phi_polarity=self.maskgen.phi_polarity,
            bn_momentum=self.backbone.bn_momentum,
        )

    def loss_weight_tuple(self) -> tuple[float, float, float]:
        return (self.loss_weights.task, self.loss_weights.kl, self.loss_weights.recon)

    def config_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.model_dump(), indent=indent)


def load_config(path: str | Path) -> ExperimentConfig:
    """Load and validate an ExperimentConfig JSON file."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    return ExperimentConfig.model_validate(data)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()
