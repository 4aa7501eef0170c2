"""Evaluation metrics: PSNR, SSIM and the non-reference underwater scores.

Full-reference metrics take image pairs; UCIQE and UIQM judge a single image
by its color/contrast statistics.  All functions accept float images in
[0, 1] (HWC numpy arrays for the non-reference metrics) and compute in
float64.  UIQM's colorfulness term follows the common convention of working
on the 8-bit intensity scale, so inputs are scaled by 255 internally.

Coefficients: UCIQE uses (0.4680, 0.2745, 0.2576) over chroma deviation,
luminance contrast and mean saturation; UIQM uses (0.0282, 0.2953, 3.5753)
over colorfulness (UICM), sharpness (UISM) and contrast (UIConM), as set in
the metrics' original publications.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import torch

from .engine import EngineError
from .losses import SSIM_C1, SSIM_C2, ssim as _ssim_torch

UCIQE_COEFFS = (0.4680, 0.2745, 0.2576)
UIQM_COEFFS = (0.0282, 0.2953, 3.5753)

PSNR_REPORT_CAP = 100.0  # dB stand-in for infinite PSNR in reports


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def psnr(x, y, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    a = _to_numpy(x).astype(np.float64)
    b = _to_numpy(y).astype(np.float64)
    if a.shape != b.shape:
        raise EngineError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def ssim_index(x, y, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Windowed SSIM of two HWC (or NCHW) images, computed in float64."""
    a = _to_numpy(x).astype(np.float64)
    b = _to_numpy(y).astype(np.float64)
    if a.ndim == 3:  # HWC -> NCHW
        a = a.transpose(2, 0, 1)[None]
        b = b.transpose(2, 0, 1)[None]
    elif a.ndim == 2:
        a = a[None, None]
        b = b[None, None]
    return float(_ssim_torch(torch.from_numpy(a), torch.from_numpy(b), c1, c2))


# --- sRGB -> CIELab (D65) ---

_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """Convert an HWC sRGB image in [0, 1] to CIELab (D65 white point)."""
    rgb = np.asarray(img, dtype=np.float64)
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB_TO_XYZ.T
    t = xyz / _WHITE_D65
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def uciqe(img: np.ndarray, coeffs=UCIQE_COEFFS) -> float:
    """Chroma deviation + luminance contrast + mean saturation, in CIELab.

    Luminance contrast is the spread between the 1st and 99th percentile of
    the normalized L channel; saturation is chroma over luminance.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise EngineError(f"uciqe needs an HWC RGB image, got shape {img.shape}")
    lab = rgb_to_lab(img)
    lum = lab[..., 0] / 100.0
    a = lab[..., 1] / 128.0
    b = lab[..., 2] / 128.0
    chroma = np.sqrt(a**2 + b**2)
    sigma_c = float(np.std(chroma))
    lum_sorted = np.sort(lum.ravel())
    n = lum_sorted.size
    contrast = float(lum_sorted[int(0.99 * n)] - lum_sorted[int(0.01 * n)])
    saturation = chroma / (lum + 1e-6)
    mu_s = float(np.mean(saturation))
    c1, c2, c3 = coeffs
    return c1 * sigma_c + c2 * contrast + c3 * mu_s


def _alpha_trimmed_mean(x: np.ndarray, alpha: float = 0.1) -> float:
    xs = np.sort(x.ravel())
    k = xs.size
    lo = int(math.ceil(alpha * k))
    hi = k - int(math.floor(alpha * k))
    return float(np.mean(xs[lo:hi]))


def _uicm(img255: np.ndarray) -> float:
    r, g, b = img255[..., 0], img255[..., 1], img255[..., 2]
    rg = (r - g).ravel()
    yb = ((r + g) / 2.0 - b).ravel()
    mu_rg = _alpha_trimmed_mean(rg)
    mu_yb = _alpha_trimmed_mean(yb)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    return -0.0268 * math.sqrt(mu_rg**2 + mu_yb**2) + 0.1586 * math.sqrt(var_rg + var_yb)


def _sobel_magnitude(channel: np.ndarray) -> np.ndarray:
    """Gradient magnitude with the standard 3x3 kernels, edge-replicated."""
    p = np.pad(channel, 1, mode="edge")
    gx = (
        p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2]
        - p[:-2, 2:] - 2 * p[1:-1, 2:] - p[2:, 2:]
    )
    gy = (
        p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:]
        - p[2:, :-2] - 2 * p[2:, 1:-1] - p[2:, 2:]
    )
    return np.sqrt(gx**2 + gy**2)


def _eme(channel: np.ndarray, window: int) -> float:
    h, w = channel.shape
    k2, k1 = h // window, w // window
    if k1 == 0 or k2 == 0:
        return 0.0
    total = 0.0
    for i in range(k2):
        for j in range(k1):
            block = channel[i * window : (i + 1) * window, j * window : (j + 1) * window]
            bmax, bmin = float(block.max()), float(block.min())
            if bmin == 0 or bmax == 0:
                continue
            total += math.log(bmax / bmin)
    return 2.0 / (k1 * k2) * total


def _uism(img255: np.ndarray, window: int) -> float:
    weights = (0.299, 0.587, 0.114)
    total = 0.0
    for c, lam in enumerate(weights):
        channel = img255[..., c]
        edge = _sobel_magnitude(channel) * channel
        total += lam * _eme(edge, window)
    return total


def _uiconm(img255: np.ndarray, window: int) -> float:
    gray = 0.299 * img255[..., 0] + 0.587 * img255[..., 1] + 0.114 * img255[..., 2]
    h, w = gray.shape
    k2, k1 = h // window, w // window
    if k1 == 0 or k2 == 0:
        return 0.0
    total = 0.0
    for i in range(k2):
        for j in range(k1):
            block = gray[i * window : (i + 1) * window, j * window : (j + 1) * window]
            bmax, bmin = float(block.max()), float(block.min())
            top, bot = bmax - bmin, bmax + bmin
            if bot == 0 or top == 0:
                continue
            total += (top / bot) * math.log(top / bot)
    return -1.0 / (k1 * k2) * total


def uiqm(img: np.ndarray, coeffs=UIQM_COEFFS, window: int = 8) -> float:
    """Colorfulness + sharpness + contrast composite for a single image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise EngineError(f"uiqm needs an HWC RGB image, got shape {img.shape}")
    img255 = img * 255.0
    c1, c2, c3 = coeffs
    return c1 * _uicm(img255) + c2 * _uism(img255, window) + c3 * _uiconm(img255, window)


# --- evaluation reports ---

@dataclass
class EvalRow:
    name: str
    values: Dict[str, float]


@dataclass
class EvalReport:
    """Per-image metric rows plus their arithmetic means."""

    dataset: str
    split: str
    rows: List[EvalRow] = field(default_factory=list)

    @property
    def columns(self) -> List[str]:
        cols: List[str] = []
        for row in self.rows:
            for key in row.values:
                if key not in cols:
                    cols.append(key)
        return cols

    def mean(self) -> Dict[str, float]:
        out = {}
        for col in self.columns:
            vals = [r.values[col] for r in self.rows if col in r.values]
            out[col] = sum(vals) / len(vals) if vals else math.nan
        return out

    def to_jsonl(self) -> str:
        lines = []
        for row in self.rows:
            rec = {"dataset": self.dataset, "split": self.split, "name": row.name}
            rec.update(row.values)
            lines.append(json.dumps(rec))
        summary = {"dataset": self.dataset, "split": self.split, "name": "__mean__"}
        summary.update(self.mean())
        lines.append(json.dumps(summary))
        return "\n".join(lines) + "\n"

    def summary_table(self) -> str:
        cols = self.columns
        mean = self.mean()
        header = ["dataset"] + cols
        row = [self.dataset] + [f"{mean[c]:.4f}" for c in cols]
        widths = [max(len(h), len(v)) for h, v in zip(header, row)]
        line1 = "  ".join(h.ljust(w) for h, w in zip(header, widths))
        line2 = "  ".join(v.ljust(w) for v, w in zip(row, widths))
        return line1 + "\n" + line2
