"""Bottleneck attention: channel-wise transformers fused by quaternion conv.

Attention maps are computed between channels rather than spatial patches, so
their size is (heads, C, C) no matter how large the feature map is and the
cost stays linear in the number of pixels.  Three wirings of the same
attention block are used:

* color-adjust: queries come from the color-balance prior, keys/values from
  the image stream (residual onto the image stream);
* feature-keep: queries from the image stream, keys/values from the prior
  (residual onto the prior stream);
* self: queries, keys and values all from the image stream.

Each block of the contextualizer runs the enabled wirings in parallel,
drops their outputs into the imaginary slots of a quaternion convolution and
adds the collapsed result back onto the image stream.  A pyramid-pooling
stage calibrates the final output at four granularities.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import simple_gate
from .engine import ChannelLayerNorm, EngineError, conv_module_macs, softmax
from .quaternion import QuaternionCollapse, QuaternionConv


class GatedFeedForward(nn.Module):
    """1x1 expansion, simple gate, 1x1 projection."""

    def __init__(self, channels: int, expand: int = 2):
        super().__init__()
        hidden = channels * expand
        self.expand = nn.Conv2d(channels, hidden, 1)
        self.contract = nn.Conv2d(hidden // 2, channels, 1)

    def forward(self, x):
        return self.contract(simple_gate(self.expand(x)))

    def macs(self, h: int, w: int) -> int:
        return conv_module_macs(self.expand, h, w) + conv_module_macs(self.contract, h, w)


class ChannelAttention(nn.Module):
    """Inter-channel attention between a query source and a key/value source.

    Both inputs are (N, C, H, W).  Queries are projected to heads*C channels,
    keys/values to 2*heads*C and chunked; all three get a depthwise 3x3.  The
    (heads, C, C) attention map is the softmaxed, temperature-scaled product
    of the flattened queries and keys.  The projected attention output is
    added to the raw key/value input, then refined by a gated feed-forward
    with a second residual onto the attention output.
    """

    def __init__(self, channels: int, heads: int = 4, ffn_expand: int = 2):
        super().__init__()
        self.channels = channels
        self.heads = heads
        hc = heads * channels
        self.norm_q = ChannelLayerNorm(channels)
        self.norm_kv = ChannelLayerNorm(channels)
        self.q_proj = nn.Conv2d(channels, hc, 1)
        self.kv_proj = nn.Conv2d(channels, 2 * hc, 1)
        self.q_dw = nn.Conv2d(hc, hc, 3, padding=1, groups=hc)
        self.k_dw = nn.Conv2d(hc, hc, 3, padding=1, groups=hc)
        self.v_dw = nn.Conv2d(hc, hc, 3, padding=1, groups=hc)
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.out_proj = nn.Conv2d(hc, channels, 1)
        self.norm_ffn = ChannelLayerNorm(channels)
        self.ffn = GatedFeedForward(channels, ffn_expand)

    def attention_map(self, q_src: torch.Tensor, kv_src: torch.Tensor) -> torch.Tensor:
        """The (N, heads, C, C) attention map alone (for inspection/tests)."""
        _, attn = self._attend(q_src, kv_src)
        return attn

    def _attend(self, q_src, kv_src):
        n, c, h, w = kv_src.shape
        if q_src.shape != kv_src.shape:
            raise EngineError(
                f"query/key sources must match: {tuple(q_src.shape)} vs {tuple(kv_src.shape)}"
            )
        q = self.q_dw(self.q_proj(self.norm_q(q_src)))
        kv = self.kv_proj(self.norm_kv(kv_src))
        k, v = torch.chunk(kv, 2, dim=1)
        k = self.k_dw(k)
        v = self.v_dw(v)
        q = q.view(n, self.heads, c, h * w)
        k = k.view(n, self.heads, c, h * w)
        v = v.view(n, self.heads, c, h * w)
        attn = softmax(torch.matmul(q, k.transpose(-2, -1)) / self.temperature, dim=-1)
        out = torch.matmul(attn, v).view(n, self.heads * c, h, w)
        return out, attn

    def forward(self, q_src, kv_src, return_attn: bool = False):
        out, attn = self._attend(q_src, kv_src)
        attn_out = self.out_proj(out)
        y = attn_out + kv_src
        y = self.ffn(self.norm_ffn(y)) + attn_out
        if return_attn:
            return y, attn
        return y

    def macs(self, h: int, w: int) -> int:
        total = 0
        for conv in (self.q_proj, self.kv_proj, self.q_dw, self.k_dw, self.v_dw, self.out_proj):
            total += conv_module_macs(conv, h, w)
        # q @ k^T and attn @ v, each heads * C * C * HW multiplies
        total += 2 * self.heads * self.channels**2 * h * w
        total += self.ffn.macs(h, w)
        return total


class MultiAttentionBlock(nn.Module):
    """Parallel attention wirings fused by quaternion convolution.

    Image-stream update: x' = x + collapse(qconv(color_adjust, feature_keep,
    self_attention)) with absent wirings contributing zero slots.  The prior
    stream is carried forward by the feature-keep output.
    """

    def __init__(
        self,
        channels: int,
        heads: int = 4,
        use_act: bool = True,
        use_kft: bool = True,
        use_sat: bool = True,
        qconv_kernel: int = 3,
        ffn_expand: int = 2,
    ):
        super().__init__()
        if not (use_act or use_kft or use_sat):
            raise EngineError("attention block needs at least one transformer enabled")
        self.act = ChannelAttention(channels, heads, ffn_expand) if use_act else None
        self.kft = ChannelAttention(channels, heads, ffn_expand) if use_kft else None
        self.sat = ChannelAttention(channels, heads, ffn_expand) if use_sat else None
        self.qconv = QuaternionConv(channels, qconv_kernel)
        self.collapse = QuaternionCollapse(channels)

    def forward(self, x, prior: Optional[torch.Tensor]):
        if (self.act is not None or self.kft is not None) and prior is None:
            raise EngineError("cross-attention wirings need prior features")
        a = self.act(prior, x) if self.act is not None else None
        b = self.kft(x, prior) if self.kft is not None else None
        s = self.sat(x, x) if self.sat is not None else None
        # absent wirings contribute zero slots, which the conv simply skips
        x_out = x + self.collapse(self.qconv(a, b, s))
        prior_out = b if b is not None else prior
        return x_out, prior_out

    def macs(self, h: int, w: int) -> int:
        total = 0
        n_inputs = 0
        for blk in (self.act, self.kft, self.sat):
            if blk is not None:
                total += blk.macs(h, w)
                n_inputs += 1
        total += self.qconv.macs(h, w, n_inputs)
        total += conv_module_macs(self.collapse.proj, h, w)
        return total


class PyramidPooling(nn.Module):
    """Average-pool at several granularities, re-project and fuse with input."""

    def __init__(self, channels: int, sizes=(1, 2, 4, 8), branch_channels: Optional[int] = None):
        super().__init__()
        self.sizes = tuple(sizes)
        branch = branch_channels if branch_channels is not None else max(channels // 4, 1)
        self.branches = nn.ModuleList(nn.Conv2d(channels, branch, 1) for _ in self.sizes)
        self.fuse = nn.Conv2d(channels + branch * len(self.sizes), channels, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        outs = [x]
        for size, conv in zip(self.sizes, self.branches):
            s = min(size, h, w)
            pooled = conv(F.adaptive_avg_pool2d(x, s))
            outs.append(F.interpolate(pooled, size=(h, w), mode="bilinear", align_corners=False))
        return self.fuse(torch.cat(outs, dim=1))

    def macs(self, h: int, w: int) -> int:
        total = 0
        for size, conv in zip(self.sizes, self.branches):
            s = min(size, h, w)
            total += conv_module_macs(conv, s, s)
        return total + conv_module_macs(self.fuse, h, w)


class FeatureContextualizer(nn.Module):
    """Bottleneck: embed, run attention blocks with residuals, calibrate."""

    def __init__(
        self,
        in_channels: int = 12,
        channels: int = 48,
        blocks: int = 4,
        heads: int = 4,
        use_act: bool = True,
        use_kft: bool = True,
        use_sat: bool = True,
        qconv_kernel: int = 3,
        ffn_expand: int = 2,
        spp_sizes=(1, 2, 4, 8),
        spp_branch_channels: Optional[int] = None,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.embed = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.blocks = nn.ModuleList(
            MultiAttentionBlock(
                channels,
                heads,
                use_act=use_act,
                use_kft=use_kft,
                use_sat=use_sat,
                qconv_kernel=qconv_kernel,
                ffn_expand=ffn_expand,
            )
            for _ in range(blocks)
        )
        self.spp = PyramidPooling(channels, spp_sizes, spp_branch_channels)

    def forward(self, x, prior: Optional[torch.Tensor] = None):
        if x.shape[1] != self.in_channels:
            raise EngineError(
                f"contextualizer expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        x = self.embed(x)
        for block in self.blocks:
            x, prior = block(x, prior)
        return self.spp(x)

    def macs(self, h: int, w: int) -> int:
        total = conv_module_macs(self.embed, h, w)
        total += sum(block.macs(h, w) for block in self.blocks)
        return total + self.spp.macs(h, w)
