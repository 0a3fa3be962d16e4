"""Independent oracles used by the test suite.

These deliberately avoid the production code paths they check: FLOPs are
counted from actual runtime shapes via hooks, excised networks are separate
modules with deep-copied weights and a plain sequential forward, and the
scheduler is re-derived as a straight-line loop.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
from torch import nn

from stmg.backbone import ResidualBackbone


def hook_flops_oracle(backbone: ResidualBackbone, x: torch.Tensor, mask=None) -> int:
    """Count conv multiply-adds from actual runtime shapes via forward hooks."""
    total = 0
    handles = []

    def hook(module, inputs, output):
        nonlocal total
        kh, kw = module.kernel_size
        cout, hout, wout = output.shape[-3], output.shape[-2], output.shape[-1]
        total += 2 * kh * kw * module.in_channels * cout * hout * wout

    for m in backbone.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(hook))
    try:
        with torch.no_grad():
            feat = backbone.features(x, mask)
            backbone.segmentation_head(feat)
    finally:
        for h in handles:
            h.remove()
    return total


class ExcisedNet(nn.Module):
    """Physically rebuilt network containing only the kept blocks.

    Weights are deep copies; the forward pass is a plain sequential loop with
    no mask machinery.
    """

    def __init__(self, backbone: ResidualBackbone, keep):
        super().__init__()
        assert len(keep) == backbone.num_prunable
        self.stem = copy.deepcopy(backbone.stem)
        layers = []
        k = 0
        for layer in backbone.layers:
            mods = [copy.deepcopy(layer[0])]
            for block in list(layer)[1:]:
                if keep[k] != 0.0:
                    mods.append(copy.deepcopy(block))
                k += 1
            layers.append(nn.ModuleList(mods))
        self.layers = nn.ModuleList(layers)
        self.final_bn = copy.deepcopy(backbone.final_bn)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        h = self.stem(x)
        for layer in self.layers:
            h = layer[0](h)
            for block in list(layer)[1:]:
                h = h + block.branch(h)
        h = torch.relu(self.final_bn(h))
        return h.squeeze(0) if squeeze else h


def straight_line_schedule(magnitudes, gamma1=2.0, gamma2=0.95):
    """Literal transcription of the scheduling rule, independent of production code."""
    roles = []
    thresholds = []
    sigma = magnitudes[0]
    for i, m in enumerate(magnitudes):
        if m > sigma:
            roles.append("key")
            sigma = gamma1 * m
        else:
            roles.append("nonkey")
            sigma = m if i == 0 else gamma2 * m
        thresholds.append(sigma)
    return roles, thresholds


def finite_difference(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite-difference gradient of scalar f w.r.t. tensor x (float64)."""
    x = x.detach().clone().to(torch.float64)
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(f(x))
        flat[i] = orig - eps
        down = float(f(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    a = torch.as_tensor(a).detach().to(torch.float64)
    b = torch.as_tensor(b).detach().to(torch.float64)
    denom = max(float(a.abs().max()), float(b.abs().max()), 1e-12)
    return float((a - b).abs().max()) / denom


def analytic_gradient(loss: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    (g,) = torch.autograd.grad(loss, x)
    return g


def random_labels(rng: np.random.Generator, num_classes: int, h: int, w: int) -> np.ndarray:
    return rng.integers(0, num_classes, size=(h, w)).astype(np.int64)
