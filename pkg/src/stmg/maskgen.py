"""Spatial-temporal mask generation.

A shared-weight feature extractor embeds two adjacent frames; the pair of
embeddings drives (a) per-block keep probabilities through batch-normalized,
clamped logits with a sparsity-inducing Gaussian prior on the shift
parameter, and (b) a per-pixel spatial mask from channelwise cosine
similarity (0 = static, 1 = fully distorted).

Probabilities are computed in float64: the clamp tolerance tau=1e-10 is not
representable next to 1.0 in float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BlockMask

DEFAULT_TAU = 1e-10
DEFAULT_TEMPERATURE = 0.1


@dataclass(frozen=True)
class MaskGeneratorConfig:
    num_blocks: int
    input_channels: int = 3
    feature_stride: int = 8
    feature_channels: int = 16
    hidden_channels: int = 16
    tau: float = DEFAULT_TAU
    rho: float = 1.0
    beta_prior: float = -1.0
    temperature: float = DEFAULT_TEMPERATURE
    stat_momentum: float = 0.1
    beta_init: float = 0.35
    noise_scale_init: float = 0.1
    phi_polarity: Literal["keep", "drop"] = "keep"
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        fs = self.feature_stride
        if fs < 2 or fs & (fs - 1):
            raise ValueError("feature_stride must be a power of two >= 2")
        if not 0 < self.tau < 0.5:
            raise ValueError("tau must lie in (0, 0.5)")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.phi_polarity not in ("keep", "drop"):
            raise ValueError("phi_polarity must be 'keep' or 'drop'")


@dataclass
class VariationalPruningState:
    """All learnable/statistical quantities of the pruning gate."""

    beta_bn: torch.Tensor   # trainable shift, length K
    delta_uc: torch.Tensor  # unconstrained noise scale, length K
    gamma: torch.Tensor     # trainable scale, length K
    mu: torch.Tensor        # running mean of logits, length K
    sigma: torch.Tensor     # running std of logits, length K, > 0
    beta_p: float = -1.0
    rho: float = 1.0
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        k = self.beta_bn.shape[-1]
        for name in ("delta_uc", "gamma", "mu", "sigma"):
            t = getattr(self, name)
            if t.shape[-1] != k:
                raise ValueError(f"{name} has length {t.shape[-1]}, expected {k}")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if not 0 < self.tau < 0.5:
            raise ValueError("tau must lie in (0, 0.5)")

    @property
    def num_blocks(self) -> int:
        return self.beta_bn.shape[-1]


def pruning_preactivation(
    logits: torch.Tensor,
    state: VariationalPruningState,
    eta: float | torch.Tensor = 0.0,
    *,
    training: bool = False,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Pre-clamp gate value: gamma_k * (g_k + eta - mu_k) / sigma_k + beta_k.

    In training mode beta_k = beta_bn_k + eps_k * softplus(delta_uc_k) with
    eps_k standard normal (pass `noise` to fix the draw). float64 output.
    """
    if (state.sigma <= 0).any():
        raise ValueError("sigma entries must be positive")
    logits64 = torch.as_tensor(logits, dtype=torch.float64)
    beta = state.beta_bn.to(torch.float64)
    if training:
        if noise is None:
            noise = torch.randn(state.beta_bn.shape, dtype=torch.float64, generator=generator)
        beta = beta + noise.to(torch.float64) * F.softplus(state.delta_uc.to(torch.float64))
    if isinstance(eta, torch.Tensor):
        eta = eta.to(torch.float64)
    gamma = state.gamma.to(torch.float64)
    mu = state.mu.to(torch.float64)
    sigma = state.sigma.to(torch.float64)
    return gamma * (logits64 + eta - mu) / sigma + beta


def pruning_probabilities(
    logits: torch.Tensor,
    state: VariationalPruningState,
    eta: float | torch.Tensor = 0.0,
    *,
    training: bool = False,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Clamped keep probabilities phi in [tau, 1 - tau] (float64).

    eta = 0 is the plain gate; eta = 0.5 - mean(m_sp) is the distortion-bias
    variant (see `distortion_bias`).
    """
    pre = pruning_preactivation(logits, state, eta, training=training, noise=noise, generator=generator)
    return pre.clamp(state.tau, 1.0 - state.tau)


def sample_block_mask(
    phi: torch.Tensor,
    mode: Literal["train", "inference"] = "inference",
    temperature: float = DEFAULT_TEMPERATURE,
    *,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
):
    """Sample the block mask from keep probabilities `phi` in (0, 1)^K.

    `train` returns differentiable relaxed-Bernoulli (binary concrete)
    samples in (0, 1); `inference` returns the deterministic hard mask
    keep_k = 1 if phi_k >= 0.5 (ties keep).
    """
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    phi = torch.as_tensor(phi)
    if ((phi <= 0) | (phi >= 1)).any():
        raise ValueError("phi entries must lie strictly inside (0, 1)")
    if mode == "inference":
        hard = (phi >= 0.5).to(torch.float64)
        if hard.dim() != 1:
            raise ValueError("inference mode expects a length-K probability vector")
        return BlockMask(keep=tuple(float(v) for v in hard))
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if noise is None:
        noise = torch.rand(phi.shape, dtype=phi.dtype, generator=generator)
    u = noise.clamp(1e-12, 1.0 - 1e-12).to(phi.dtype)
    logit_phi = torch.log(phi) - torch.log1p(-phi)
    logit_u = torch.log(u) - torch.log1p(-u)
    return torch.sigmoid((logit_phi + logit_u) / temperature)


def spatial_mask(t: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """Per-pixel distortion estimate: -0.5 * cos(t_i, e_i) + 0.5, in [0, 1].

    `t`, `e` are (C, h, w) or (B, C, h, w); the cosine runs over channels.
    Zero-norm pixels get cos = 0, i.e. a neutral 0.5. Identical, orthogonal
    and opposite channel vectors map exactly to 0, 0.5 and 1.
    """
    if t.shape != e.shape:
        raise ValueError(f"feature shapes differ: {tuple(t.shape)} vs {tuple(e.shape)}")
    if t.dim() not in (3, 4):
        raise ValueError("features must be (C, h, w) or (B, C, h, w)")
    dim = 0 if t.dim() == 3 else 1
    num = (t * e).sum(dim=dim)
    prod = (t * t).sum(dim=dim) * (e * e).sum(dim=dim)
    zero = prod == 0
    den = torch.sqrt(torch.where(zero, torch.ones_like(prod), prod))
    cos = torch.where(zero, torch.zeros_like(num), num / den).clamp(-1.0, 1.0)
    return 0.5 - 0.5 * cos


def mask_magnitude(mask: torch.Tensor) -> float:
    """Scalar distortion magnitude of a spatial mask: the spatial mean."""
    return float(torch.as_tensor(mask).mean())


def distortion_bias(mask: torch.Tensor) -> torch.Tensor:
    """dbb bias eta = -mean(m_sp) + 0.5, as a differentiable scalar (per map).

    For batched masks (B, h, w) returns shape (B, 1) for broadcasting against
    (B, K) logits.
    """
    m = torch.as_tensor(mask)
    if m.dim() == 3:
        return 0.5 - m.mean(dim=(1, 2), keepdim=False).unsqueeze(1)
    return 0.5 - m.mean()


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class MaskGenerator(nn.Module):
    """Shared feature extractor + block-pruning head + pruning-gate state."""

    def __init__(self, config: MaskGeneratorConfig):
        super().__init__()
        self.config = config
        stages = []
        in_ch = config.input_channels
        for _ in range(int(math.log2(config.feature_stride))):
            stages += [
                nn.Conv2d(in_ch, config.feature_channels, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(config.feature_channels, momentum=config.bn_momentum),
                nn.ReLU(inplace=True),
            ]
            in_ch = config.feature_channels
        self.encoder = nn.Sequential(*stages)
        self.head_conv = nn.Conv2d(2 * config.feature_channels, config.hidden_channels, 3, padding=1, bias=False)
        self.head_bn = nn.BatchNorm2d(config.hidden_channels, momentum=config.bn_momentum)
        self.head_out = nn.Conv2d(config.hidden_channels, config.num_blocks, 1)
        nn.init.zeros_(self.head_out.weight)
        nn.init.zeros_(self.head_out.bias)

        k = config.num_blocks
        self.beta_bn = nn.Parameter(torch.full((k,), float(config.beta_init)))
        self.delta_uc = nn.Parameter(torch.full((k,), float(_softplus_inverse(config.noise_scale_init))))
        self.gamma = nn.Parameter(torch.ones(k))
        self.register_buffer("running_mu", torch.zeros(k))
        self.register_buffer("running_var", torch.ones(k))

    @property
    def num_blocks(self) -> int:
        return self.config.num_blocks

    def extract(self, frame: torch.Tensor) -> torch.Tensor:
        """Shared-weight feature extractor Enc_f; (C,H,W) -> (c_f, h_f, w_f)."""
        squeeze = frame.dim() == 3
        if squeeze:
            frame = frame.unsqueeze(0)
        out = self.encoder(frame)
        return out.squeeze(0) if squeeze else out

    def pruning_logits(self, t: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        """Channel-concatenate the pair, convolve, and pool to K scalars."""
        if t.shape != e.shape:
            raise ValueError(f"feature shapes differ: {tuple(t.shape)} vs {tuple(e.shape)}")
        squeeze = t.dim() == 3
        if squeeze:
            t, e = t.unsqueeze(0), e.unsqueeze(0)
        h = F.relu(self.head_bn(self.head_conv(torch.cat([t, e], dim=1))))
        logits = self.head_out(h).mean(dim=(2, 3))
        return logits.squeeze(0) if squeeze else logits

    def pruning_state(self) -> VariationalPruningState:
        return VariationalPruningState(
            beta_bn=self.beta_bn,
            delta_uc=self.delta_uc,
            gamma=self.gamma,
            mu=self.running_mu,
            sigma=torch.sqrt(self.running_var + 1e-5),
            beta_p=self.config.beta_prior,
            rho=self.config.rho,
            tau=self.config.tau,
        )

    @torch.no_grad()
    def update_logit_statistics(self, logits: torch.Tensor) -> None:
        """EMA update of the running logit mean/variance from a training batch."""
        batch = logits.detach().to(self.running_mu.dtype)
        if batch.dim() == 1:
            batch = batch.unsqueeze(0)
        mom = self.config.stat_momentum
        mean = batch.mean(dim=0)
        self.running_mu.mul_(1 - mom).add_(mom * mean)
        if batch.shape[0] > 1:
            var = batch.var(dim=0, unbiased=False)
            self.running_var.mul_(1 - mom).add_(mom * var)

    def keep_probabilities(
        self,
        logits: torch.Tensor,
        eta: float | torch.Tensor = 0.0,
        *,
        training: bool = False,
        noise: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Keep probabilities under the configured polarity (float64)."""
        phi = pruning_probabilities(
            logits, self.pruning_state(), eta, training=training, noise=noise, generator=generator
        )
        if self.config.phi_polarity == "drop":
            phi = 1.0 - phi
        return phi
