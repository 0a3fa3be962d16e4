"""Training objectives: KL sparsity, BCE + dice mask reconstruction, task CE."""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .maskgen import VariationalPruningState

DEFAULT_LOSS_WEIGHTS = (1.0, 1e-4, 1.0)  # (task, kl, recon)


@dataclass(frozen=True)
class LossReport:
    """Per-step loss breakdown; total = w_task*task + w_kl*kl + w_recon*(bce+dice)."""

    task: float
    kl: float
    bce: float
    dice: float
    weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS

    @property
    def total(self) -> float:
        w_task, w_kl, w_recon = self.weights
        return w_task * self.task + w_kl * self.kl + w_recon * (self.bce + self.dice)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "kl": self.kl,
            "bce": self.bce,
            "dice": self.dice,
            "total": self.total,
            "weights": {"task": self.weights[0], "kl": self.weights[1], "recon": self.weights[2]},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def kl_sparsity(state: VariationalPruningState) -> torch.Tensor:
    """Per-block KL of the gate shift against the sparsity prior, length K.

    Closed form log(rho/delta) + (delta^2 + (beta_p - beta_bn)^2) / (2 rho^2)
    with delta = softplus(delta_uc). Note this omits the usual -1/2 constant;
    the gradient is unaffected and the offset is pinned by tests.
    """
    if state.rho <= 0:
        raise ValueError("rho must be positive")
    delta = F.softplus(state.delta_uc)
    if (delta <= 0).any():
        raise ValueError("delta must be positive")
    rho = state.rho
    gap = state.beta_p - state.beta_bn
    return torch.log(rho / delta) + (delta * delta + gap * gap) / (2.0 * rho * rho)


def dice_loss(m: torch.Tensor, n: torch.Tensor, kappa: float = 1.0) -> torch.Tensor:
    """Dice loss 1 - (2*sum(m*n)+kappa) / (sum(m^2)+sum(n^2)+kappa), in [0, 1)."""
    if m.shape != n.shape:
        raise ValueError(f"shapes differ: {tuple(m.shape)} vs {tuple(n.shape)}")
    n = n.to(m.dtype)
    inter = (m * n).sum()
    denom = (m * m).sum() + (n * n).sum() + kappa
    return 1.0 - (2.0 * inter + kappa) / denom


def bce_loss(m: torch.Tensor, n: torch.Tensor, tau: float = 1e-10) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy; m is clipped to [tau, 1-tau].

    Computed in float64 so the tau=1e-10 clip is representable.
    """
    if m.shape != n.shape:
        raise ValueError(f"shapes differ: {tuple(m.shape)} vs {tuple(n.shape)}")
    m64 = m.to(torch.float64).clamp(tau, 1.0 - tau)
    n64 = n.to(torch.float64)
    return -(n64 * torch.log(m64) + (1.0 - n64) * torch.log1p(-m64)).mean()


def task_loss(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy after softmax over the class dimension.

    `scores` is (C, H, W) or (B, C, H, W); `labels` integer (H, W) / (B, H, W).
    """
    if scores.dim() == 3:
        scores = scores.unsqueeze(0)
        labels = labels.unsqueeze(0)
    if scores.shape[0] != labels.shape[0] or scores.shape[-2:] != labels.shape[-2:]:
        raise ValueError(f"scores {tuple(scores.shape)} incompatible with labels {tuple(labels.shape)}")
    labels = labels.long()
    if labels.min() < 0 or labels.max() >= scores.shape[1]:
        raise ValueError(f"labels must lie in [0, {scores.shape[1]})")
    return F.cross_entropy(scores, labels)
