"""Single-file checkpoint archive: named parameter arrays + config JSON."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .backbone import ResidualBackbone
from .config import ConfigError, ExperimentConfig
from .maskgen import MaskGenerator

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class LoadedCheckpoint:
    backbone: ResidualBackbone
    maskgen: MaskGenerator
    config: ExperimentConfig
    config_hash: str


def save_checkpoint(
    path: str | Path,
    backbone: ResidualBackbone,
    maskgen: MaskGenerator,
    config: ExperimentConfig,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config_json": config.model_dump_json(),
            "config_hash": config.config_hash(),
            "backbone_state": backbone.state_dict(),
            "maskgen_state": maskgen.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path, expected_config: ExperimentConfig | None = None) -> LoadedCheckpoint:
    """Rebuild models from a checkpoint; optionally verify the config hash."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    version = blob.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format_version {version}")
    config = ExperimentConfig.model_validate_json(blob["config_json"])
    if blob["config_hash"] != config.config_hash():
        raise ConfigError("checkpoint config hash does not match its embedded config")
    if expected_config is not None and expected_config.config_hash() != blob["config_hash"]:
        raise ConfigError(
            "supplied config does not match the checkpoint "
            f"(expected hash {blob['config_hash'][:12]}, got {expected_config.config_hash()[:12]})"
        )
    backbone = ResidualBackbone(config.backbone_config())
    backbone.load_state_dict(blob["backbone_state"])
    maskgen = MaskGenerator(config.maskgen_config())
    maskgen.load_state_dict(blob["maskgen_state"])
    backbone.eval()
    maskgen.eval()
    return LoadedCheckpoint(backbone=backbone, maskgen=maskgen, config=config, config_hash=blob["config_hash"])
