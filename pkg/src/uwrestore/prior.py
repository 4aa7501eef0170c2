"""Gray-World color balance prior and its feature embeddings.

Water absorbs red light faster than green and blue, so underwater images
carry a systematic channel imbalance.  Under the Gray-World assumption the
spatial mean of each channel should agree in a neutrally lit scene; the prior
image replaces every pixel by the mean of its R, G and B values, which by
construction satisfies that balance exactly.  The network consumes feature
embeddings of the prior rather than raw values: a small activation-free
extractor produces a full-resolution map for the last decoder fusion and a
bottleneck-scale map for the cross-attention stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import NAFBlock
from .engine import EngineError, conv_module_macs


def compute_prior(img: torch.Tensor) -> torch.Tensor:
    """Per-pixel channel mean, replicated across the three channels.

    The mean is accumulated in float64 so the result is exactly invariant
    under any permutation of the input channels, then cast back.
    """
    if img.dim() != 4 or img.shape[1] != 3:
        raise EngineError(f"prior needs an (N, 3, H, W) image, got {tuple(img.shape)}")
    if img.requires_grad:
        mean = img.mean(dim=1, keepdim=True)
    else:
        mean = (img.double().sum(dim=1, keepdim=True) / 3.0).to(img.dtype)
    return mean.expand(-1, 3, -1, -1).contiguous()


def channel_means(img: torch.Tensor) -> tuple:
    """Spatial mean intensity of each channel; quantifies the color cast."""
    if img.dim() != 4 or img.shape[1] != 3:
        raise EngineError(f"channel_means needs an (N, 3, H, W) image, got {tuple(img.shape)}")
    m = img.mean(dim=(0, 2, 3))
    return (m[0].item(), m[1].item(), m[2].item())


@dataclass
class PriorPack:
    """Prior image plus its two feature embeddings."""

    prior_image: torch.Tensor
    top_feat: torch.Tensor
    bottleneck_feat: torch.Tensor


class PriorExtractor(nn.Module):
    """Activation-free feature stacks over the prior at the encoder scales.

    Two gated blocks per scale with strided 3x3 downsampling in between;
    the deepest scale is projected to the bottleneck embedding width.
    """

    def __init__(
        self,
        widths=(3, 6, 12),
        embed_channels: int = 48,
        blocks_per_scale: int = 2,
        dropout: float = 0.0,
    ):
        super().__init__()
        self.widths = tuple(widths)
        stages = []
        downs = []
        for idx, width in enumerate(self.widths):
            stages.append(
                nn.Sequential(*[NAFBlock(width, dropout=dropout) for _ in range(blocks_per_scale)])
            )
            if idx + 1 < len(self.widths):
                downs.append(nn.Conv2d(width, self.widths[idx + 1], 3, stride=2, padding=1))
        self.stages = nn.ModuleList(stages)
        self.downs = nn.ModuleList(downs)
        self.to_embed = nn.Conv2d(self.widths[-1], embed_channels, 1)

    def forward(self, prior_img: torch.Tensor) -> PriorPack:
        x = self.stages[0](prior_img)
        top = x
        for down, stage in zip(self.downs, self.stages[1:]):
            x = stage(down(x))
        return PriorPack(prior_image=prior_img, top_feat=top, bottleneck_feat=self.to_embed(x))

    def macs(self, h: int, w: int) -> int:
        total = 0
        for idx, stage in enumerate(self.stages):
            for block in stage:
                total += block.macs(h, w)
            if idx < len(self.downs):
                total += conv_module_macs(self.downs[idx], h, w)
                h, w = (h + 1) // 2, (w + 1) // 2
        return total + conv_module_macs(self.to_embed, h, w)
