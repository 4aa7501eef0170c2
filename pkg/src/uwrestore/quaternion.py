"""Quaternion-constrained fusion of parallel branch outputs.

Branch feature maps are placed in the imaginary slots of a quaternion whose
real part is zero, then convolved with a quaternion-valued kernel.  Expanding
the product couples the branches through four shared real kernels instead of
giving every output channel its own free mixing weights.

For inputs A (i slot) and B (j slot) the expansion used here is

    out_r = -A*Wi - B*Wj
    out_i =  A*Wr - B*Wk
    out_j =  A*Wk + B*Wr
    out_k =  A*Wj - B*Wi

(`*` is conv2d).  A third input C in the k slot extends each line with the
matching C term (+0, +C*Wj, +C*Wi, +C*Wr respectively) so the two-input case
above is recovered exactly when C is absent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .engine import EngineError


@dataclass
class QuaternionFeature:
    """Four same-shaped component maps of a quaternion-valued feature."""

    r: torch.Tensor
    i: torch.Tensor
    j: torch.Tensor
    k: torch.Tensor

    def cat(self) -> torch.Tensor:
        return torch.cat([self.r, self.i, self.j, self.k], dim=1)

    @staticmethod
    def from_branches(a: torch.Tensor, b: torch.Tensor) -> "QuaternionFeature":
        """Embed two branch outputs with zero real and k components."""
        if a.shape != b.shape:
            raise EngineError(
                f"branch shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}"
            )
        zero = torch.zeros_like(a)
        return QuaternionFeature(r=zero, i=a, j=b, k=zero.clone())


class QuaternionConv(nn.Module):
    """Hamilton-product convolution over zero-real quaternion features.

    Holds the four kernel parts (bias-free, identical geometry) and applies
    the expansion as a single grouped real convolution on the concatenated
    inputs: the block weight matrix is assembled from signed views of the
    four parts, so gradients flow back to each shared kernel.
    """

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 != 1:
            raise EngineError(f"kernel_size must be odd, got {kernel_size}")
        self.channels = channels
        self.kernel_size = kernel_size
        self.padding = kernel_size // 2
        shape = (channels, channels, kernel_size, kernel_size)
        scale = (channels * kernel_size * kernel_size) ** -0.5
        self.w_r = nn.Parameter(torch.empty(shape).uniform_(-scale, scale))
        self.w_i = nn.Parameter(torch.empty(shape).uniform_(-scale, scale))
        self.w_j = nn.Parameter(torch.empty(shape).uniform_(-scale, scale))
        self.w_k = nn.Parameter(torch.empty(shape).uniform_(-scale, scale))

    def forward(
        self,
        a: Optional[torch.Tensor] = None,
        b: Optional[torch.Tensor] = None,
        c: Optional[torch.Tensor] = None,
    ) -> QuaternionFeature:
        inputs = [t for t in (a, b, c) if t is not None]
        if not inputs:
            raise EngineError("quaternion conv needs at least one input slot")
        ref = inputs[0]
        for t in inputs[1:]:
            if t.shape != ref.shape:
                raise EngineError(
                    f"input shapes differ: {tuple(ref.shape)} vs {tuple(t.shape)}"
                )
        if ref.shape[1] != self.channels:
            raise EngineError(
                f"input has {ref.shape[1]} channels, kernels expect {self.channels}"
            )

        wr, wi, wj, wk = self.w_r, self.w_i, self.w_j, self.w_k
        # columns in (A, B, C) order, rows in (r, i, j, k) order
        cols = {
            "a": (-wi, wr, wk, wj),
            "b": (-wj, -wk, wr, -wi),
            "c": (-wk, wj, wi, wr),
        }
        present = [name for name, t in zip("abc", (a, b, c)) if t is not None]
        rows = []
        for comp in range(4):
            rows.append(torch.cat([cols[name][comp] for name in present], dim=1))
        weight = torch.cat(rows, dim=0)
        x = torch.cat(inputs, dim=1)
        out = F.conv2d(x, weight, padding=self.padding)
        r, i, j, k = torch.chunk(out, 4, dim=1)
        return QuaternionFeature(r=r, i=i, j=j, k=k)

    def macs(self, h: int, w: int, n_inputs: int = 2) -> int:
        """Multiply-accumulates of one application on an h x w map."""
        per_term = self.channels * self.channels * self.kernel_size**2
        return 4 * n_inputs * per_term * h * w


class QuaternionCollapse(nn.Module):
    """Project the four quaternion components back to the branch width."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(4 * channels, channels, kernel_size=1)

    def forward(self, q: QuaternionFeature) -> torch.Tensor:
        return self.proj(q.cat())
