"""Spatial-temporal mask generation lab for streaming segmentation."""

__version__ = "0.1.0"

from .backbone import BackboneConfig, BlockMask, ResidualBackbone, count_flops
from .config import ExperimentConfig, default_config, load_config
from .losses import LossReport, bce_loss, dice_loss, kl_sparsity, task_loss
from .maskgen import (
    MaskGenerator,
    MaskGeneratorConfig,
    VariationalPruningState,
    distortion_bias,
    mask_magnitude,
    pruning_probabilities,
    sample_block_mask,
    spatial_mask,
)
from .pipeline import (
    PolicySpec,
    SchedulerState,
    aggregate,
    evaluate_miou,
    run_stream,
    schedule_step,
    simulate_schedule,
)
from .synthdata import (
    Frame,
    FrameSequence,
    LabelMap,
    generate_sequence,
    load_sequence,
    oracle_distortion_map,
    save_sequence,
)

__all__ = [
    "BackboneConfig",
    "BlockMask",
    "ResidualBackbone",
    "count_flops",
    "ExperimentConfig",
    "default_config",
    "load_config",
    "LossReport",
    "bce_loss",
    "dice_loss",
    "kl_sparsity",
    "task_loss",
    "MaskGenerator",
    "MaskGeneratorConfig",
    "VariationalPruningState",
    "distortion_bias",
    "mask_magnitude",
    "pruning_probabilities",
    "sample_block_mask",
    "spatial_mask",
    "PolicySpec",
    "SchedulerState",
    "aggregate",
    "evaluate_miou",
    "run_stream",
    "schedule_step",
    "simulate_schedule",
    "Frame",
    "FrameSequence",
    "LabelMap",
    "generate_sequence",
    "load_sequence",
    "oracle_distortion_map",
    "save_sequence",
]
