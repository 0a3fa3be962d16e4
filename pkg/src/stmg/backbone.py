"""Residual segmentation backbone with prunable blocks and analytic FLOPs.

Pre-activation residual blocks are used so that a hard-skipped block is an
exact identity: block output = input + keep_k * branch(input). The first
block of every layer changes channels/stride and is never prunable. Masked
forward with a hard-zero entry does not evaluate the branch at all.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture of the toy residual segmenter.

    `layers` is a tuple of (blocks_per_layer, channels). The number of
    prunable blocks is K = sum(blocks_per_layer - 1).
    """

    layers: tuple[tuple[int, int], ...] = ((3, 16), (4, 32))
    input_channels: int = 3
    num_classes: int = 4
    feature_stride: int = 8
    bn_momentum: float = 0.1

    def __post_init__(self):
        if not self.layers:
            raise ValueError("at least one residual layer is required")
        for blocks, channels in self.layers:
            if blocks < 1 or channels < 1:
                raise ValueError(f"invalid layer spec {(blocks, channels)}")
        fs = self.feature_stride
        if fs < 2 or fs & (fs - 1):
            raise ValueError("feature_stride must be a power of two >= 2")
        if self.num_prunable < 1:
            raise ValueError("config must yield at least one prunable block")
        self.layer_strides  # validates stride budget

    @property
    def num_prunable(self) -> int:
        return sum(blocks - 1 for blocks, _ in self.layers)

    @property
    def layer_strides(self) -> tuple[int, ...]:
        # stem takes one factor of 2; the rest is distributed over leading layers
        remaining = self.feature_stride // 2
        strides = []
        for _ in self.layers:
            if remaining > 1:
                strides.append(2)
                remaining //= 2
            else:
                strides.append(1)
        if remaining > 1:
            raise ValueError(
                f"feature_stride {self.feature_stride} needs more downsampling layers "
                f"than the {len(self.layers)} available"
            )
        return tuple(strides)


@dataclass(frozen=True)
class BlockMask:
    """Keep/drop decisions over the K prunable blocks (1 = execute)."""

    keep: tuple[float, ...]

    def __post_init__(self):
        for v in self.keep:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"mask entries must lie in [0, 1], got {v}")

    def __len__(self) -> int:
        return len(self.keep)

    @classmethod
    def ones(cls, k: int) -> "BlockMask":
        return cls(keep=(1.0,) * k)

    @classmethod
    def zeros(cls, k: int) -> "BlockMask":
        return cls(keep=(0.0,) * k)

    @property
    def num_kept(self) -> int:
        return sum(1 for v in self.keep if v != 0.0)

    @property
    def is_hard(self) -> bool:
        return all(v in (0.0, 1.0) for v in self.keep)


class PrunableBlock(nn.Module):
    """Pre-activation residual block with identity shortcut."""

    def __init__(self, channels: int, bn_momentum: float = 0.1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(channels, momentum=bn_momentum)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels, momentum=bn_momentum)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)

    def branch(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.relu(self.bn1(x)))
        return self.conv2(F.relu(self.bn2(h)))


class TransitionBlock(nn.Module):
    """First block of a layer: projection shortcut, optional stride. Never pruned."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, bn_momentum: float = 0.1):
        super().__init__()
        self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False)
        self.bn1 = nn.BatchNorm2d(in_channels, momentum=bn_momentum)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels, momentum=bn_momentum)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.relu(self.bn1(x)))
        h = self.conv2(F.relu(self.bn2(h)))
        return self.shortcut(x) + h


class ResidualBackbone(nn.Module):
    """Configurable residual feature extractor + segmentation head."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        ch0 = config.layers[0][1]
        self.stem = nn.Conv2d(config.input_channels, ch0, 3, stride=2, padding=1, bias=False)
        blocks = []
        in_ch = ch0
        for (num_blocks, channels), stride in zip(config.layers, config.layer_strides):
            layer = nn.ModuleList()
            layer.append(TransitionBlock(in_ch, channels, stride, config.bn_momentum))
            for _ in range(num_blocks - 1):
                layer.append(PrunableBlock(channels, config.bn_momentum))
            blocks.append(layer)
            in_ch = channels
        self.layers = nn.ModuleList(blocks)
        self.final_bn = nn.BatchNorm2d(in_ch, momentum=config.bn_momentum)
        self.head_conv = nn.Conv2d(in_ch, config.num_classes, 1)

    @property
    def num_prunable(self) -> int:
        return self.config.num_prunable

    def _mask_entries(self, mask, batch: int):
        """Normalize a mask into K per-block entries (floats or tensors)."""
        k = self.num_prunable
        if mask is None:
            return [1.0] * k
        if isinstance(mask, BlockMask):
            entries = list(mask.keep)
        elif isinstance(mask, torch.Tensor):
            if mask.dim() == 1:
                entries = [mask[i] for i in range(mask.shape[0])]
            elif mask.dim() == 2:
                if mask.shape[0] != batch:
                    raise ValueError(f"mask batch {mask.shape[0]} != input batch {batch}")
                entries = [mask[:, i].view(-1, 1, 1, 1) for i in range(mask.shape[1])]
            else:
                raise ValueError("mask tensor must be (K,) or (batch, K)")
        else:
            entries = list(mask)
        if len(entries) != k:
            raise ValueError(f"mask length {len(entries)} != {k} prunable blocks")
        return entries

    def features(self, x: torch.Tensor, mask=None) -> torch.Tensor:
        """Backbone feature map. `mask` gates the prunable blocks.

        Hard float entries 0.0/1.0 skip/execute the residual branch exactly;
        tensor entries multiply the branch (differentiable relaxed path).
        """
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.config.input_channels:
            raise ValueError(f"expected {self.config.input_channels} input channels, got {x.shape[1]}")
        entries = self._mask_entries(mask, x.shape[0])
        h = self.stem(x)
        k = 0
        for layer in self.layers:
            h = layer[0](h)
            for block in list(layer)[1:]:
                m = entries[k]
                k += 1
                if isinstance(m, torch.Tensor):
                    h = h + m * block.branch(h)
                elif m == 0.0:
                    continue  # branch not evaluated: identity through the skip
                elif m == 1.0:
                    h = h + block.branch(h)
                else:
                    h = h + m * block.branch(h)
        h = F.relu(self.final_bn(h))
        return h.squeeze(0) if squeeze else h

    def forward_full(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x, None)

    def forward_masked(self, x: torch.Tensor, mask) -> torch.Tensor:
        return self.features(x, mask)

    def segmentation_head(self, feature: torch.Tensor, output_size: tuple[int, int] | None = None) -> torch.Tensor:
        """Project features to class scores and upsample to input resolution."""
        squeeze = feature.dim() == 3
        if squeeze:
            feature = feature.unsqueeze(0)
        scores = self.head_conv(feature)
        if output_size is None:
            s = self.config.feature_stride
            output_size = (scores.shape[-2] * s, scores.shape[-1] * s)
        scores = F.interpolate(scores, size=output_size, mode="bilinear", align_corners=False)
        return scores.squeeze(0) if squeeze else scores

    def forward(self, x: torch.Tensor, mask=None) -> torch.Tensor:
        out_hw = (x.shape[-2], x.shape[-1])
        return self.segmentation_head(self.features(x, mask), out_hw)

    def count_flops(self, mask=None, input_hw: tuple[int, int] = (64, 64)) -> int:
        return count_flops(self.config, mask, input_hw)


def _conv_out(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def _conv_flops(kh: int, kw: int, cin: int, cout: int, hout: int, wout: int) -> int:
    return 2 * kh * kw * cin * cout * hout * wout


def count_flops(config: BackboneConfig, mask=None, input_hw: tuple[int, int] = (64, 64)) -> int:
    """Analytic multiply-add count (2 * k_h * k_w * C_in * C_out * H_out * W_out
    per convolution, head included). Skipped blocks contribute zero."""
    if mask is None:
        keep: Sequence[float] = (1.0,) * config.num_prunable
    elif isinstance(mask, BlockMask):
        keep = mask.keep
    elif isinstance(mask, torch.Tensor):
        keep = [float(v) for v in mask.detach().cpu()]
    else:
        keep = [float(v) for v in mask]
    if len(keep) != config.num_prunable:
        raise ValueError(f"mask length {len(keep)} != {config.num_prunable} prunable blocks")

    h, w = input_hw
    total = 0
    # stem: 3x3 stride 2
    h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
    total += _conv_flops(3, 3, config.input_channels, config.layers[0][1], h, w)
    in_ch = config.layers[0][1]
    k = 0
    for (num_blocks, channels), stride in zip(config.layers, config.layer_strides):
        h, w = _conv_out(h, 3, stride, 1), _conv_out(w, 3, stride, 1)
        # transition block: 1x1 shortcut + two 3x3 convs
        total += _conv_flops(1, 1, in_ch, channels, h, w)
        total += _conv_flops(3, 3, in_ch, channels, h, w)
        total += _conv_flops(3, 3, channels, channels, h, w)
        block_cost = 2 * _conv_flops(3, 3, channels, channels, h, w)
        for _ in range(num_blocks - 1):
            if keep[k] != 0.0:
                total += block_cost
            k += 1
        in_ch = channels
    total += _conv_flops(1, 1, in_ch, config.num_classes, h, w)
    return total


def prunable_block_cost(config: BackboneConfig, block_index: int, input_hw: tuple[int, int] = (64, 64)) -> int:
    """Standalone analytic cost of one prunable block."""
    ones = [1.0] * config.num_prunable
    dropped = list(ones)
    dropped[block_index] = 0.0
    return count_flops(config, ones, input_hw) - count_flops(config, dropped, input_hw)
