"""Plain convolutional stand-ins for the ablation baseline.

The baseline keeps the U-shape, downsampling depth and module counts of the
full model but swaps every custom block for a stack of 3x3 conv + LeakyReLU
layers at conventional UNet widths.  Any subset of custom modules can then be
re-enabled at its original position for ablation runs.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .engine import LEAKY_SLOPE, conv_module_macs


class PlainConvBlock(nn.Module):
    """n_convs 3x3 conv + LeakyReLU layers mapping in_channels -> width."""

    def __init__(self, in_channels: int, width: int, n_convs: int):
        super().__init__()
        convs = []
        c = in_channels
        for _ in range(n_convs):
            convs.append(nn.Conv2d(c, width, 3, padding=1))
            c = width
        self.convs = nn.ModuleList(convs)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x):
        for conv in self.convs:
            x = self.act(conv(x))
        return x

    def macs(self, h: int, w: int) -> int:
        return sum(conv_module_macs(conv, h, w) for conv in self.convs)


class PlainFusionBlock(nn.Module):
    """Plain decoder stage: concatenate skip/up features, then conv stack."""

    def __init__(self, skip_channels: int, up_channels: int, width: int, n_convs: int):
        super().__init__()
        self.body = PlainConvBlock(skip_channels + up_channels, width, n_convs)

    def forward(self, skip, up):
        return self.body(torch.cat([skip, up], dim=1))

    def macs(self, h: int, w: int) -> int:
        return self.body.macs(h, w)
