"""Request/response models for the service API."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from ..config import (
    AggregationSettings,
    DatasetConfig,
    ExperimentConfig,
    PolicySettings,
)


class HealthResponse(BaseModel):
    status: str
    version: str


class GendataRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: DatasetConfig = DatasetConfig()
    out_dir: str


class GendataResponse(BaseModel):
    dataset_dir: str
    manifest_path: str
    num_frames: int


class TrainRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: ExperimentConfig = ExperimentConfig()
    out_dir: Optional[str] = None


class TrainResponse(BaseModel):
    run_dir: str
    checkpoint_path: str
    metrics_path: str
    config_path: str
    steps: int
    final_loss: float
    final_mean_keep_prob: float


class EvalRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    checkpoint: str
    out_dir: Optional[str] = None
    policy: Optional[PolicySettings] = None
    aggregation: Optional[AggregationSettings] = None
    dbb_bias: Optional[bool] = None
    eval_seed: Optional[int] = None
    num_frames: Optional[int] = Field(None, ge=2)
    dump_masks: Optional[bool] = None
    config_check_hash: Optional[str] = None


class EvalResponse(BaseModel):
    run_dir: str
    summary_path: str
    frames_log_path: str
    summary: dict


class SimulateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    magnitudes: list[float] = Field(min_length=1)
    gamma1: float = Field(2.0, gt=1)
    gamma2: float = Field(0.95, gt=0, le=1)


class SimulateStep(BaseModel):
    index: int
    magnitude: float
    role: str
    threshold: float


class SimulateResponse(BaseModel):
    trace: list[SimulateStep]


class PlotRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    run_dirs: list[str] = Field(min_length=1)
    out_dir: str
    mask_panels_from: Optional[str] = None


class PlotResponse(BaseModel):
    figures: list[str]
