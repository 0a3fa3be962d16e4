"""Streaming inference: feature aggregation, distortion-aware scheduling,
per-frame metrics and mIoU evaluation."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
import torch

from .backbone import BlockMask, ResidualBackbone, count_flops
from .maskgen import (
    MaskGenerator,
    distortion_bias,
    mask_magnitude,
    sample_block_mask,
    spatial_mask,
)
from .synthdata import FrameSequence, LabelMap

ROLE_KEY = "key"
ROLE_NONKEY = "nonkey"

AggregationMode = Literal["stmg", "fixed", "uniform", "random"]
PolicyKind = Literal["distortion_aware", "fixed", "always_full", "per_frame_pruning"]


def aggregate(
    prev: torch.Tensor,
    cur: torch.Tensor,
    m: torch.Tensor | None = None,
    mode: AggregationMode = "stmg",
    *,
    fixed_value: float | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Per-pixel convex blend of previous and current backbone features:
    out = m * cur + (1 - m) * prev, with the blend weight chosen by `mode`.

    stmg uses the supplied spatial mask; fixed uses a constant in [0, 1];
    uniform uses 0.5; random draws per-pixel weights uniformly from [0, 1].
    """
    if prev.shape != cur.shape:
        raise ValueError(f"feature shapes differ: {tuple(prev.shape)} vs {tuple(cur.shape)}")
    hw = prev.shape[-2:]
    if mode == "stmg":
        if m is None:
            raise ValueError("stmg aggregation requires a spatial mask")
        if m.shape[-2:] != hw:
            raise ValueError(f"mask shape {tuple(m.shape)} does not match features {tuple(prev.shape)}")
        weight = m.unsqueeze(-3).to(cur.dtype)  # broadcast over channels
    elif mode in ("fixed", "uniform"):
        v = 0.5 if mode == "uniform" else fixed_value
        if v is None or not 0.0 <= v <= 1.0:
            raise ValueError(f"fixed aggregation needs a blend value in [0, 1], got {v}")
        return float(v) * cur + (1.0 - float(v)) * prev
    elif mode == "random":
        weight = torch.rand(hw, dtype=cur.dtype, generator=generator).unsqueeze(-3)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return weight * cur + (1.0 - weight) * prev


@dataclass(frozen=True)
class SchedulerState:
    """Running threshold state of the distortion-aware policy."""

    threshold: float = 0.0
    gamma1: float = 2.0
    gamma2: float = 0.95
    last_role: str = ROLE_KEY  # frame 0 is always key
    frame_index: int = 1       # next transition to schedule

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if not (self.gamma1 > 1 >= self.gamma2 > 0):
            raise ValueError("scaling factors must satisfy gamma1 > 1 >= gamma2 > 0")


def schedule_step(state: SchedulerState, magnitude: float) -> tuple[str, SchedulerState]:
    """One step of the distortion-aware schedule.

    A frame is key iff its magnitude strictly exceeds the threshold; the
    threshold becomes gamma1 * magnitude after a key frame and
    gamma2 * magnitude after a non-key frame. The first scheduled transition
    initializes the threshold to its own magnitude (and is therefore
    non-key, with the threshold left unchanged).
    """
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    first = state.frame_index == 1
    threshold = magnitude if first else state.threshold
    if magnitude > threshold:
        role = ROLE_KEY
        new_threshold = state.gamma1 * magnitude
    else:
        role = ROLE_NONKEY
        new_threshold = magnitude if first else state.gamma2 * magnitude
    return role, dataclasses.replace(
        state, threshold=new_threshold, last_role=role, frame_index=state.frame_index + 1
    )


def simulate_schedule(
    magnitudes: Sequence[float], gamma1: float = 2.0, gamma2: float = 0.95
) -> list[dict]:
    """Run the scheduling rule over a magnitude trace; one record per step."""
    state = SchedulerState(gamma1=gamma1, gamma2=gamma2)
    trace = []
    for i, mag in enumerate(magnitudes):
        role, state = schedule_step(state, float(mag))
        trace.append(
            {"index": i + 1, "magnitude": float(mag), "role": role, "threshold": state.threshold}
        )
    return trace


class ConfusionAccumulator:
    """Streaming per-class confusion counts for IoU."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, prediction: np.ndarray, truth: np.ndarray) -> None:
        if prediction.shape != truth.shape:
            raise ValueError(f"shapes differ: {prediction.shape} vs {truth.shape}")
        idx = truth.reshape(-1).astype(np.int64) * self.num_classes + prediction.reshape(-1).astype(np.int64)
        self.matrix += np.bincount(idx, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both prediction and truth."""
        tp = np.diag(self.matrix).astype(np.float64)
        fp = self.matrix.sum(axis=0) - tp
        fn = self.matrix.sum(axis=1) - tp
        denom = tp + fp + fn
        with np.errstate(invalid="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)

    def mean_iou(self) -> float:
        iou = self.iou()
        present = ~np.isnan(iou)
        if not present.any():
            return float("nan")
        return float(iou[present].mean())


def evaluate_miou(
    predictions: Sequence[LabelMap | np.ndarray],
    truths: Sequence[LabelMap | np.ndarray],
    num_classes: int,
) -> tuple[np.ndarray, float]:
    """Accumulated per-class IoU over all frames plus the mean over present classes."""
    if len(predictions) != len(truths):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths")
    acc = ConfusionAccumulator(num_classes)
    for pred, truth in zip(predictions, truths):
        p = pred.classes if isinstance(pred, LabelMap) else pred
        t = truth.classes if isinstance(truth, LabelMap) else truth
        acc.update(p, t)
    return acc.iou(), acc.mean_iou()


@dataclass(frozen=True)
class PolicySpec:
    """Frame-role policy: distortion_aware(gamma1, gamma2), fixed(R),
    always_full, or per_frame_pruning (prune every frame, no aggregation)."""

    kind: PolicyKind = "distortion_aware"
    gamma1: float = 2.0
    gamma2: float = 0.95
    refresh_period: int = 2  # R for the fixed policy

    def __post_init__(self):
        if self.kind == "fixed" and self.refresh_period < 1:
            raise ValueError("fixed policy needs refresh_period >= 1")


@dataclass
class FrameResult:
    index: int
    role: str
    magnitude: float | None
    block_mask: tuple[float, ...] | None
    flops: int
    latency_s: float
    predicted: np.ndarray
    feature_mean: float
    feature_std: float
    spatial_mask: np.ndarray | None = None

    def to_record(self) -> dict:
        return {
            "index": self.index,
            "role": self.role,
            "magnitude": self.magnitude,
            "mask": None if self.block_mask is None else [int(v) for v in self.block_mask],
            "flops": self.flops,
            "latency_ms": self.latency_s * 1e3,
            "feature_mean": self.feature_mean,
            "feature_std": self.feature_std,
        }


@dataclass
class StreamResult:
    frames: list[FrameResult]
    per_class_iou: np.ndarray
    miou: float
    summary: dict


def _keep_ratio(mask: tuple[float, ...] | None, k: int) -> float:
    if mask is None:
        return 1.0
    return sum(1.0 for v in mask if v != 0.0) / k


def run_stream(
    seq: FrameSequence,
    backbone: ResidualBackbone,
    maskgen: MaskGenerator,
    policy: PolicySpec | None = None,
    *,
    agg_mode: AggregationMode = "stmg",
    fixed_value: float | None = None,
    dbb_bias: bool = False,
    fam_on_key: bool = False,
    cache: Literal["backbone", "aggregated"] = "backbone",
    random_seed: int = 0,
    device: str = "cpu",
) -> StreamResult:
    """Process a frame sequence in order, scheduling key/non-key frames.

    Frame 0 always runs the full network. Non-key frames run the pruned
    backbone and blend their features with the cached previous features
    (except under per_frame_pruning, which never aggregates). Per-frame
    wall-clock excludes data preparation and includes mask-generator cost.
    """
    if len(seq) < 2:
        raise ValueError("sequence must contain at least 2 frames")
    if policy is None:
        policy = PolicySpec()
    backbone = backbone.to(device).eval()
    maskgen = maskgen.to(device).eval()
    k = backbone.num_prunable
    c, h, w = seq.frame_shape
    full_flops = count_flops(backbone.config, None, (h, w))
    state = maskgen.pruning_state()
    rand_gen = torch.Generator(device=device).manual_seed(random_seed)

    frames_t = [torch.from_numpy(f.pixels).to(device) for f in seq.frames]

    results: list[FrameResult] = []
    acc = ConfusionAccumulator(seq.num_classes)
    sched = SchedulerState(gamma1=policy.gamma1, gamma2=policy.gamma2)
    prev_feature: torch.Tensor | None = None
    prev_extracted: torch.Tensor | None = None
    needs_maskgen = policy.kind in ("distortion_aware", "per_frame_pruning") or (
        policy.kind == "fixed" and policy.refresh_period > 1
    )

    with torch.no_grad():
        for i, frame in enumerate(frames_t):
            start = time.perf_counter()
            magnitude: float | None = None
            m_sp: torch.Tensor | None = None
            extracted: torch.Tensor | None = None

            if i > 0 and needs_maskgen:
                extracted = maskgen.extract(frame)
                m_sp = spatial_mask(prev_extracted, extracted)
                magnitude = mask_magnitude(m_sp)

            if i == 0:
                role = ROLE_KEY
            elif policy.kind == "always_full":
                role = ROLE_KEY
            elif policy.kind == "fixed":
                role = ROLE_KEY if i % policy.refresh_period == 0 else ROLE_NONKEY
            elif policy.kind == "per_frame_pruning":
                role = ROLE_NONKEY
            else:
                role, sched = schedule_step(sched, magnitude)

            if role == ROLE_KEY:
                feature = backbone.forward_full(frame)
                cache_feature = feature
                if fam_on_key and prev_feature is not None and m_sp is not None:
                    feature = aggregate(
                        prev_feature, feature, m_sp, agg_mode,
                        fixed_value=fixed_value, generator=rand_gen,
                    )
                block_mask = None
                flops = full_flops
            else:
                if extracted is None:  # fixed policy non-key frames still prune
                    extracted = maskgen.extract(frame)
                    m_sp = spatial_mask(prev_extracted, extracted)
                    magnitude = mask_magnitude(m_sp)
                logits = maskgen.pruning_logits(prev_extracted, extracted)
                eta = distortion_bias(m_sp) if dbb_bias else 0.0
                phi = maskgen.keep_probabilities(logits, eta)
                mask = sample_block_mask(phi, "inference")
                masked = backbone.forward_masked(frame, mask)
                if policy.kind == "per_frame_pruning":
                    feature = masked
                else:
                    feature = aggregate(
                        prev_feature, masked, m_sp, agg_mode,
                        fixed_value=fixed_value, generator=rand_gen,
                    )
                cache_feature = masked if cache == "backbone" else feature
                block_mask = mask.keep
                flops = count_flops(backbone.config, mask, (h, w))

            scores = backbone.segmentation_head(feature, (h, w))
            predicted = scores.argmax(dim=0).cpu().numpy()
            if extracted is None and needs_maskgen:
                extracted = maskgen.extract(frame)  # frame 0 cache fill
            latency = time.perf_counter() - start

            prev_feature = cache_feature
            if needs_maskgen:
                prev_extracted = extracted

            acc.update(predicted, seq.labels[i].classes)
            results.append(
                FrameResult(
                    index=i,
                    role=role,
                    magnitude=magnitude,
                    block_mask=block_mask,
                    flops=flops,
                    latency_s=latency,
                    predicted=predicted,
                    feature_mean=float(feature.mean()),
                    feature_std=float(feature.std()),
                    spatial_mask=None if m_sp is None else m_sp.cpu().numpy(),
                )
            )

    per_class = acc.iou()
    miou = acc.mean_iou()
    latencies = [r.latency_s for r in results]
    nonkey = [r for r in results if r.role == ROLE_NONKEY]
    summary = {
        "num_frames": len(results),
        "miou": miou,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
        "mean_flops": float(np.mean([r.flops for r in results])),
        "full_flops": full_flops,
        "flops_ratio": float(np.mean([r.flops for r in results]) / full_flops),
        "mean_latency_ms": float(np.mean(latencies) * 1e3),
        "max_latency_ms": float(np.max(latencies) * 1e3),
        "key_frame_ratio": sum(1 for r in results if r.role == ROLE_KEY) / len(results),
        "mean_sparsity": float(np.mean([1.0 - _keep_ratio(r.block_mask, k) for r in nonkey])) if nonkey else 0.0,
        "mean_keep_ratio": float(np.mean([_keep_ratio(r.block_mask, k) for r in results])),
        "policy": policy.kind,
        "aggregation": agg_mode,
        "dbb_bias": dbb_bias,
    }
    return StreamResult(frames=results, per_class_iou=per_class, miou=miou, summary=summary)
