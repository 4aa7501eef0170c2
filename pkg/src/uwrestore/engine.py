"""Core tensor primitives used by every layer of the network.

All dense math is delegated to PyTorch (CPU); this module pins down the
conventions the rest of the package relies on: NCHW layout, channel-wise
layer normalization, numerically stable softmax, and reverse-mode gradients
via the autograd tape.  Training runs in float32; gradient-check tests switch
the same code to float64.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

LEAKY_SLOPE = 0.2
LAYERNORM_EPS = 1e-6


class EngineError(ValueError):
    """Raised when an operation's preconditions are violated."""


def seed_all(seed: int) -> None:
    """Seed python, numpy and torch RNGs for reproducible runs."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


@dataclass
class ConvKernel:
    """A 2-D convolution kernel: (out_ch, in_ch/groups, kH, kW) weights."""

    weight: torch.Tensor
    bias: Optional[torch.Tensor] = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.weight.dim() != 4:
            raise EngineError(f"kernel weight must be 4-D, got {tuple(self.weight.shape)}")
        if self.out_channels % self.groups != 0:
            raise EngineError(
                f"groups={self.groups} must divide out_channels={self.out_channels}"
            )
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise EngineError(
                f"bias shape {tuple(self.bias.shape)} does not match out_channels={self.out_channels}"
            )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups


def conv2d(x: torch.Tensor, k: ConvKernel) -> torch.Tensor:
    """2-D convolution of an NCHW tensor with shape checking."""
    if x.dim() != 4:
        raise EngineError(f"conv2d expects NCHW input, got shape {tuple(x.shape)}")
    if x.shape[1] != k.in_channels:
        raise EngineError(
            f"conv2d channel mismatch: input shape {tuple(x.shape)} has "
            f"{x.shape[1]} channels but kernel shape {tuple(k.weight.shape)} "
            f"(groups={k.groups}) expects {k.in_channels}"
        )
    return F.conv2d(x, k.weight, k.bias, stride=k.stride, padding=k.padding, groups=k.groups)


def layer_norm(
    x: torch.Tensor,
    weight: Optional[torch.Tensor] = None,
    bias: Optional[torch.Tensor] = None,
    eps: float = LAYERNORM_EPS,
) -> torch.Tensor:
    """Normalize over the channel axis independently at each spatial location.

    Uses the biased variance.  Zero-variance inputs are safe: the epsilon
    keeps the denominator positive, so a constant channel vector maps to
    zeros before the affine part.
    """
    if x.dim() != 4:
        raise EngineError(f"layer_norm expects NCHW input, got shape {tuple(x.shape)}")
    c = x.shape[1]
    y = F.layer_norm(x.permute(0, 2, 3, 1), (c,), weight, bias, eps)
    return y.permute(0, 3, 1, 2)


class ChannelLayerNorm(torch.nn.Module):
    """Learnable channel-wise layer norm for NCHW feature maps."""

    def __init__(self, channels: int, eps: float = LAYERNORM_EPS):
        super().__init__()
        self.eps = eps
        self.weight = torch.nn.Parameter(torch.ones(channels))
        self.bias = torch.nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


def softmax(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Shift-invariant softmax (the max is subtracted before exponentiating,
    which torch.softmax performs internally)."""
    return torch.softmax(x, dim=dim)


def grad(loss: torch.Tensor, wrt: Iterable[torch.Tensor]) -> tuple:
    """Reverse-mode gradients of a scalar loss w.r.t. the given leaves."""
    if loss.numel() != 1:
        raise EngineError(f"grad expects a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise EngineError("gradient requested on a detached graph (loss has no grad_fn)")
    wrt = tuple(wrt)
    return torch.autograd.grad(loss, wrt, allow_unused=False)


# --- remaining primitives; thin wrappers so each layer builds on one vocabulary ---

def chunk_channels(x: torch.Tensor, chunks: int) -> tuple:
    if x.shape[1] % chunks != 0:
        raise EngineError(f"cannot split {x.shape[1]} channels into {chunks} equal chunks")
    return torch.chunk(x, chunks, dim=1)


def concat_channels(parts: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.cat(list(parts), dim=1)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a @ b


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=(2, 3), keepdim=True)


def adaptive_avg_pool(x: torch.Tensor, size: int) -> torch.Tensor:
    return F.adaptive_avg_pool2d(x, size)


def bilinear_upsample(x: torch.Tensor, scale: float = 2.0, size=None) -> torch.Tensor:
    if size is not None:
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return F.interpolate(x, scale_factor=scale, mode="bilinear", align_corners=False)


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    return F.leaky_relu(x, negative_slope=slope)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def dropout(x: torch.Tensor, p: float, training: bool) -> torch.Tensor:
    if p < 0 or p >= 1:
        raise EngineError(f"dropout rate must be in [0, 1), got {p}")
    return F.dropout(x, p=p, training=training)


def conv_module_macs(conv: torch.nn.Conv2d, h: int, w: int) -> int:
    """MACs of an nn.Conv2d applied to an h x w input (bias not counted)."""
    kh, kw = conv.kernel_size
    sh, sw = conv.stride
    ph, pw = conv.padding if isinstance(conv.padding, tuple) else (conv.padding, conv.padding)
    h_out = (h + 2 * ph - kh) // sh + 1
    w_out = (w + 2 * pw - kw) // sw + 1
    per_pos = conv.out_channels * (conv.in_channels // conv.groups) * kh * kw
    return per_pos * h_out * w_out
