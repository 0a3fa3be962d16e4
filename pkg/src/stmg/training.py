"""Joint training of backbone + mask generator on adjacent-frame pairs.

Each step samples pairs (I_prev, I_cur): the previous frame runs the full
network as a fixed key frame (no gradient by default), the current frame
runs with relaxed block masks; features are blended with the spatial mask
and the prediction is supervised on the current frame's labels. The spatial
mask is distilled against the oracle distortion map; the gate shift carries
the sparsity-inducing KL term.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import ResidualBackbone
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .losses import LossReport, bce_loss, dice_loss, kl_sparsity, task_loss
from .maskgen import MaskGenerator, distortion_bias, sample_block_mask, spatial_mask
from .pipeline import aggregate
from .synthdata import generate_sequence, oracle_distortion_map

CHECKPOINT_NAME = "checkpoint.pt"
METRICS_NAME = "metrics.jsonl"
CONFIG_NAME = "config.json"


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    config_path: Path
    steps: int
    final_loss: float
    final_mean_keep_prob: float


def train(config: ExperimentConfig, out_dir: str | Path, device: str = "cpu") -> TrainResult:
    """Run the training loop and write checkpoint + JSON-lines metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(config.to_json())

    torch.manual_seed(config.seed)
    sample_rng = np.random.default_rng(config.seed + 1)
    noise_gen = torch.Generator().manual_seed(config.seed + 2)

    ds = config.dataset
    stride = config.backbone.feature_stride
    sequences = [
        generate_sequence(
            ds.seed + s,
            ds.num_frames,
            ds.num_objects,
            ds.speed,
            height=ds.height,
            width=ds.width,
            num_classes=ds.num_classes,
            channels=ds.channels,
        )
        for s in range(ds.num_sequences)
    ]
    frames = torch.from_numpy(
        np.stack([f.pixels for seq in sequences for f in seq.frames])
    ).to(device)
    labels = torch.from_numpy(
        np.stack([l.classes for seq in sequences for l in seq.labels])
    ).to(device)
    # teacher map for flat index i pairs frame i with its predecessor
    at_input_res = config.maskgen.teacher_resolution == "input"
    teacher_hw = (ds.height, ds.width) if at_input_res else (ds.height // stride, ds.width // stride)
    teacher_np = np.zeros((frames.shape[0], *teacher_hw), dtype=np.float32)
    cur_indices = []
    for s, seq in enumerate(sequences):
        base = s * ds.num_frames
        for i in range(1, len(seq)):
            teacher_np[base + i] = oracle_distortion_map(
                seq.labels[i - 1], seq.labels[i], downsample=None if at_input_res else stride
            )
            cur_indices.append(base + i)
    teacher = torch.from_numpy(teacher_np).to(device)
    cur_indices = np.asarray(cur_indices)

    backbone = ResidualBackbone(config.backbone_config()).to(device)
    maskgen = MaskGenerator(config.maskgen_config()).to(device)
    params = list(backbone.parameters()) + list(maskgen.parameters())
    opt = torch.optim.SGD(
        params,
        lr=config.training.lr,
        momentum=config.training.momentum,
        weight_decay=config.training.weight_decay,
    )
    if config.training.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=config.training.steps, eta_min=config.training.lr / 10
        )
    else:
        scheduler = None
    weights = config.loss_weight_tuple()
    w_task, w_kl, w_recon = weights
    temperature = config.maskgen.temperature
    use_dbb = config.maskgen.dbb_bias
    batch = config.training.batch_size

    final_report: LossReport | None = None
    final_keep = float("nan")
    with (out / METRICS_NAME).open("w") as metrics:
        key_period = (
            round(1.0 / config.training.key_step_fraction)
            if config.training.key_step_fraction > 0
            else 0
        )
        for step in range(config.training.steps):
            cur_idx_t = torch.from_numpy(sample_rng.choice(cur_indices, size=batch))
            prev = frames[cur_idx_t - 1]
            cur = frames[cur_idx_t]
            lab = labels[cur_idx_t]
            n_map = teacher[cur_idx_t]
            key_step = key_period > 0 and step % key_period == 0

            if not key_step:
                backbone.eval()
                if config.training.freeze_key:
                    with torch.no_grad():
                        feat_prev = backbone.features(prev)
                else:
                    feat_prev = backbone.features(prev)
            backbone.train()
            maskgen.train()

            t_feat = maskgen.extract(prev)
            e_feat = maskgen.extract(cur)
            m_sp = spatial_mask(t_feat, e_feat)
            logits = maskgen.pruning_logits(t_feat, e_feat)
            maskgen.update_logit_statistics(logits)
            eta = distortion_bias(m_sp) if use_dbb else 0.0
            phi = maskgen.keep_probabilities(logits, eta, training=True, generator=noise_gen)
            z = sample_block_mask(phi, "train", temperature, generator=noise_gen)

            if key_step:
                # key-frame path: full network on the current frame, no reuse
                feat = backbone.features(cur)
            else:
                feat_cur = backbone.features(cur, z.to(torch.float32))
                feat = aggregate(feat_prev, feat_cur, m_sp)
            scores = backbone.segmentation_head(feat, (ds.height, ds.width))

            task = task_loss(scores, lab)
            if at_input_res:  # supervise each bin with its changed-pixel fraction
                m_for_recon = m_sp.repeat_interleave(stride, dim=-2).repeat_interleave(stride, dim=-1)
            else:
                m_for_recon = m_sp
            bce = bce_loss(m_for_recon, n_map, tau=config.maskgen.tau)
            dice = torch.stack(
                [dice_loss(m_for_recon[b], n_map[b]) for b in range(m_for_recon.shape[0])]
            ).mean()
            kl = kl_sparsity(maskgen.pruning_state()).sum()
            total = w_task * task + w_kl * kl + w_recon * (bce.to(task.dtype) + dice)

            if not torch.isfinite(total):
                raise RuntimeError(
                    f"non-finite loss at step {step}: task={task.item()} kl={kl.item()} "
                    f"bce={bce.item()} dice={dice.item()}"
                )

            opt.zero_grad()
            total.backward()
            opt.step()
            if scheduler is not None:
                scheduler.step()

            final_report = LossReport(
                task=task.item(), kl=kl.item(), bce=bce.item(), dice=dice.item(), weights=weights
            )
            with torch.no_grad():  # noise-free keep probability for monitoring
                eta_inf = distortion_bias(m_sp.detach()) if use_dbb else 0.0
                final_keep = maskgen.keep_probabilities(logits.detach(), eta_inf).mean().item()
            if step % config.training.log_every == 0 or step == config.training.steps - 1:
                record = final_report.to_dict()
                record.update(
                    {
                        "step": step,
                        "mean_keep_prob": final_keep,
                        "mean_train_keep_prob": phi.detach().mean().item(),
                        "mean_mask_magnitude": m_sp.detach().mean().item(),
                    }
                )
                metrics.write(json.dumps(record) + "\n")

    backbone.eval()
    maskgen.eval()
    ckpt = save_checkpoint(out / CHECKPOINT_NAME, backbone, maskgen, config)
    return TrainResult(
        checkpoint_path=ckpt,
        metrics_path=out / METRICS_NAME,
        config_path=out / CONFIG_NAME,
        steps=config.training.steps,
        final_loss=final_report.total if final_report else float("nan"),
        final_mean_keep_prob=final_keep,
    )
