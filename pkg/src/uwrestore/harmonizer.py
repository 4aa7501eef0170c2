"""Decoder fusion: concatenated skip/upsampled features, calibrated in place.

Each calibrator modulates a 1x1-projected main path with an input-conditioned
scale map and adds an input-conditioned shift map:

    calib(x) = conv1x1(x) * scale(x) + shift(x)

Scale and shift each come from a conditioned weighting layer that averages
three depthwise branches of growing receptive field (1x1, 3x3, 5x5) before a
1x1 projection to the target width.  A harmonizer chains three calibrators.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .engine import EngineError, conv_module_macs


class ConditionedWeighting(nn.Module):
    """Average of three granularity branches, projected to the target width."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.g1 = nn.Conv2d(in_channels, in_channels, 1, groups=in_channels)
        self.g3 = nn.Conv2d(in_channels, in_channels, 3, padding=1, groups=in_channels)
        self.g5 = nn.Conv2d(in_channels, in_channels, 5, padding=2, groups=in_channels)
        self.mix = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        avg = (self.g1(x) + self.g3(x) + self.g5(x)) / 3.0
        return self.mix(avg)

    def macs(self, h: int, w: int) -> int:
        return sum(conv_module_macs(c, h, w) for c in (self.g1, self.g3, self.g5, self.mix))


class FeatureCalibrator(nn.Module):
    """Input-conditioned scale-and-shift modulation of a projected main path."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.main = nn.Conv2d(in_channels, out_channels, 1)
        self.scale = ConditionedWeighting(in_channels, out_channels)
        self.shift = ConditionedWeighting(in_channels, out_channels)

    def forward(self, x):
        return self.main(x) * self.scale(x) + self.shift(x)

    def macs(self, h: int, w: int) -> int:
        return conv_module_macs(self.main, h, w) + self.scale.macs(h, w) + self.shift.macs(h, w)


class ScaleHarmonizer(nn.Module):
    """Concatenate skip and upsampled features, then calibrate sequentially."""

    def __init__(self, skip_channels: int, up_channels: int, out_channels: int, stages: int = 3):
        super().__init__()
        if stages < 1:
            raise EngineError(f"harmonizer needs at least one stage, got {stages}")
        calibrators = [FeatureCalibrator(skip_channels + up_channels, out_channels)]
        calibrators += [FeatureCalibrator(out_channels, out_channels) for _ in range(stages - 1)]
        self.calibrators = nn.ModuleList(calibrators)

    def forward(self, skip, up):
        if skip.shape[-2:] != up.shape[-2:]:
            raise EngineError(
                f"skip and upsampled features must share spatial dims: "
                f"{tuple(skip.shape)} vs {tuple(up.shape)}"
            )
        x = torch.cat([skip, up], dim=1)
        for calib in self.calibrators:
            x = calib(x)
        return x

    def macs(self, h: int, w: int) -> int:
        return sum(c.macs(h, w) for c in self.calibrators)
