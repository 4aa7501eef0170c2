"""Composite training objective: pixel fidelity + structure + perception.

    L = w1 * smooth_l1 + w2 * (1 - ssim) + w3 * perceptual

with default weights (1, 0.3, 0.7).  The perceptual term needs a pretrained
feature network; it is defined here only as a backend interface and the term
is skipped whenever no backend is configured.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .engine import EngineError

# a perceptual backend maps (restored, target) NCHW batches to a scalar distance
PerceptualBackend = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class LossConfig:
    w_fidelity: float = 1.0
    w_structure: float = 0.3
    w_perceptual: float = 0.7
    beta: float = 1.0
    ssim_c1: float = SSIM_C1
    ssim_c2: float = SSIM_C2
    ssim_mode: str = "windowed"  # or "global"
    perceptual_backend: Optional[PerceptualBackend] = field(default=None, repr=False)

    def __post_init__(self):
        if min(self.w_fidelity, self.w_structure, self.w_perceptual) < 0:
            raise EngineError("loss weights must be non-negative")
        if self.beta <= 0:
            raise EngineError(f"smooth-l1 beta must be positive, got {self.beta}")
        if self.ssim_mode not in ("windowed", "global"):
            raise EngineError(f"unknown ssim_mode {self.ssim_mode!r}")


def smooth_l1(restored: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Mean piecewise loss: quadratic below beta, linear above."""
    if beta <= 0:
        raise EngineError(f"smooth-l1 beta must be positive, got {beta}")
    if restored.shape != target.shape:
        raise EngineError(
            f"shape mismatch: {tuple(restored.shape)} vs {tuple(target.shape)}"
        )
    diff = (restored - target).abs()
    return torch.where(diff < beta, diff.square() / (2 * beta), diff - beta / 2).mean()


_WINDOW_CACHE: dict = {}


def _gaussian_taps(size: int, sigma: float, dtype, device) -> torch.Tensor:
    key = (size, sigma, dtype, device)
    if key not in _WINDOW_CACHE:
        coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
        g = torch.exp(-coords.square() / (2 * sigma**2))
        _WINDOW_CACHE[key] = g / g.sum()
    return _WINDOW_CACHE[key]


def _window_filter(x: torch.Tensor, taps: torch.Tensor, groups: int) -> torch.Tensor:
    """Valid-padding filter with the separable window outer(taps, taps)."""
    size = taps.numel()
    col = taps.view(1, 1, size, 1).expand(groups, 1, size, 1).contiguous()
    row = taps.view(1, 1, 1, size).expand(groups, 1, 1, size).contiguous()
    return F.conv2d(F.conv2d(x, col, groups=groups), row, groups=groups)


def ssim(
    x: torch.Tensor,
    y: torch.Tensor,
    c1: float = SSIM_C1,
    c2: float = SSIM_C2,
    mode: str = "windowed",
    window: int = SSIM_WINDOW,
    sigma: float = SSIM_SIGMA,
) -> torch.Tensor:
    """Structural similarity of two NCHW batches in [0, 1].

    Windowed mode convolves an 11x11 Gaussian (sigma 1.5) per channel with
    valid padding and averages the local SSIM map; global mode uses one set
    of statistics per image.  Images smaller than the window fall back to
    global statistics.
    """
    if x.shape != y.shape:
        raise EngineError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() != 4:
        raise EngineError(f"ssim expects NCHW input, got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if mode == "windowed" and min(h, w) >= window:
        c = x.shape[1]
        taps = _gaussian_taps(window, sigma, x.dtype, x.device)
        # one separable grouped filter smooths all five statistics maps at once
        stacked = torch.cat([x, y, x * x, y * y, x * y], dim=0)
        mu_x, mu_y, m_xx, m_yy, m_xy = torch.chunk(_window_filter(stacked, taps, c), 5, dim=0)
        var_x = m_xx - mu_x.square()
        var_y = m_yy - mu_y.square()
        cov = m_xy - mu_x * mu_y
    else:
        dims = (1, 2, 3)
        mu_x = x.mean(dim=dims, keepdim=True)
        mu_y = y.mean(dim=dims, keepdim=True)
        var_x = (x * x).mean(dim=dims, keepdim=True) - mu_x.square()
        var_y = (y * y).mean(dim=dims, keepdim=True) - mu_y.square()
        cov = (x * y).mean(dim=dims, keepdim=True) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x.square() + mu_y.square() + c1) * (var_x + var_y + c2)
    )
    return ssim_map.mean()


def ssim_loss(x, y, c1=SSIM_C1, c2=SSIM_C2, mode="windowed"):
    return 1.0 - ssim(x, y, c1, c2, mode)


def composite_loss(
    restored: torch.Tensor,
    target: torch.Tensor,
    cfg: LossConfig = LossConfig(),
) -> tuple:
    """Weighted objective; returns (total, parts dict).

    The perceptual term is included only when a backend is configured.
    """
    parts = {}
    total = restored.new_zeros(())
    if cfg.w_fidelity:
        parts["fidelity"] = smooth_l1(restored, target, cfg.beta)
        total = total + cfg.w_fidelity * parts["fidelity"]
    if cfg.w_structure:
        parts["structure"] = ssim_loss(restored, target, cfg.ssim_c1, cfg.ssim_c2, cfg.ssim_mode)
        total = total + cfg.w_structure * parts["structure"]
    if cfg.w_perceptual and cfg.perceptual_backend is not None:
        parts["perceptual"] = cfg.perceptual_backend(restored, target)
        total = total + cfg.w_perceptual * parts["perceptual"]
    return total, parts
