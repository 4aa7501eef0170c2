"""Encoder building blocks: gated conv block, context block and their fusion.

The detail-restoration stage runs two parallel branches over the same input:
an activation-free gated block (pixel-wise self-attention through a simple
gate) and a residual context block (spatial softmax pooling of per-channel
context).  Their outputs are fused by a quaternion convolution and projected
back to the branch width; six such units are chained per encoder scale.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .engine import EngineError, conv_module_macs, leaky_relu, softmax
from .quaternion import QuaternionCollapse, QuaternionConv


def simple_gate(x: torch.Tensor) -> torch.Tensor:
    """Split channels in half and multiply the halves element-wise."""
    if x.shape[1] % 2 != 0:
        raise EngineError(f"simple gate needs an even channel count, got {x.shape[1]}")
    a, b = torch.chunk(x, 2, dim=1)
    return a * b


class SimpleChannelAttention(nn.Module):
    """Global-average-pool -> 1x1 conv -> per-channel rescaling."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        w = self.conv(x.mean(dim=(2, 3), keepdim=True))
        return x * w

    def macs(self, h: int, w: int) -> int:
        return conv_module_macs(self.conv, 1, 1)


class NAFBlock(nn.Module):
    """Activation-free block: two gated residual parts, the first with SCA."""

    def __init__(self, channels: int, expand: int = 2, dropout: float = 0.0):
        super().__init__()
        hidden = channels * expand
        self.pw1 = nn.Conv2d(channels, hidden, 1)
        self.dw1 = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.sca = SimpleChannelAttention(hidden // 2)
        self.pw2 = nn.Conv2d(hidden // 2, channels, 1)
        self.pw3 = nn.Conv2d(channels, hidden, 1)
        self.dw2 = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.pw4 = nn.Conv2d(hidden // 2, channels, 1)
        self.dropout = dropout

    def forward(self, x):
        y = simple_gate(self.dw1(self.pw1(x)))
        y = self.pw2(self.sca(y))
        if self.dropout > 0:
            y = F.dropout(y, self.dropout, self.training)
        y = x + y
        z = simple_gate(self.dw2(self.pw3(y)))
        z = self.pw4(z)
        if self.dropout > 0:
            z = F.dropout(z, self.dropout, self.training)
        return y + z

    def macs(self, h: int, w: int) -> int:
        total = 0
        for conv in (self.pw1, self.dw1, self.pw2, self.pw3, self.dw2, self.pw4):
            total += conv_module_macs(conv, h, w)
        return total + self.sca.macs(h, w)


class ContextBlock(nn.Module):
    """Spatial-softmax context pooling added back channel-wise.

    A 1x1 conv scores every position; the softmax of the scores weights a
    per-channel sum over positions, giving one context value per channel,
    which is transformed and broadcast-added to the input.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.mask_conv = nn.Conv2d(channels, 1, 1)
        self.t1 = nn.Conv2d(channels, channels, 1)
        self.t2 = nn.Conv2d(channels, channels, 1)

    def spatial_mask(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        scores = self.mask_conv(x).view(n, 1, -1)
        return softmax(scores, dim=-1)

    def forward(self, x):
        n, c, h, w = x.shape
        inp = x.view(n, 1, c, h * w)
        mask = self.spatial_mask(x).unsqueeze(-1)          # (n, 1, hw, 1)
        context = torch.matmul(inp, mask).view(n, c, 1, 1)
        context = self.t2(leaky_relu(self.t1(context)))
        return x + context

    def macs(self, h: int, w: int) -> int:
        c = self.t1.in_channels
        total = conv_module_macs(self.mask_conv, h, w)
        total += c * h * w                                  # context matmul
        total += conv_module_macs(self.t1, 1, 1) + conv_module_macs(self.t2, 1, 1)
        return total


class ResidualContextBlock(nn.Module):
    """Two depthwise 3x3 convs plus context aggregation, all residual."""

    def __init__(self, channels: int):
        super().__init__()
        self.dw1 = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.dw2 = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.context = ContextBlock(channels)

    def forward(self, x):
        r = self.dw2(leaky_relu(self.dw1(x)))
        r = leaky_relu(self.context(r))
        return x + r

    def macs(self, h: int, w: int) -> int:
        return (
            conv_module_macs(self.dw1, h, w)
            + conv_module_macs(self.dw2, h, w)
            + self.context.macs(h, w)
        )


class DetailUnit(nn.Module):
    """One fusion unit: parallel RCB/NAFB branches merged by quaternion conv."""

    def __init__(
        self,
        channels: int,
        use_rcb: bool = True,
        use_nafb: bool = True,
        qconv_kernel: int = 3,
        dropout: float = 0.0,
    ):
        super().__init__()
        if not (use_rcb or use_nafb):
            raise EngineError("detail unit needs at least one branch enabled")
        self.rcb = ResidualContextBlock(channels) if use_rcb else None
        self.nafb = NAFBlock(channels, dropout=dropout) if use_nafb else None
        self.qconv = QuaternionConv(channels, qconv_kernel)
        self.collapse = QuaternionCollapse(channels)

    def forward(self, x):
        a = self.rcb(x) if self.rcb is not None else None
        b = self.nafb(x) if self.nafb is not None else None
        return self.collapse(self.qconv(a, b))

    def macs(self, h: int, w: int) -> int:
        total = 0
        n_inputs = 0
        if self.rcb is not None:
            total += self.rcb.macs(h, w)
            n_inputs += 1
        if self.nafb is not None:
            total += self.nafb.macs(h, w)
            n_inputs += 1
        total += self.qconv.macs(h, w, n_inputs)
        total += conv_module_macs(self.collapse.proj, h, w)
        return total


class DetailRestorer(nn.Module):
    """Six sequential detail units at one encoder scale (shape preserving)."""

    def __init__(self, channels: int, units: int = 6, **unit_kwargs):
        super().__init__()
        self.units = nn.ModuleList(
            DetailUnit(channels, **unit_kwargs) for _ in range(units)
        )

    def forward(self, x):
        for unit in self.units:
            x = unit(x)
        return x

    def macs(self, h: int, w: int) -> int:
        return sum(unit.macs(h, w) for unit in self.units)
