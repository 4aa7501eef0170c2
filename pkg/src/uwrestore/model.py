"""Full restoration network: U-shaped assembly with prior guidance.

Encoder scales run detail-restoration blocks with channel-doubling strided
downsamples (3 -> 6 -> 12 under defaults), the bottleneck contextualizes the
12-channel quarter-resolution features into a 48-channel embedding guided by
the color-balance prior, and the decoder fuses skips back up through scale
harmonizers (48 -> 24 -> 12) before a 3x3 head and an input/output skip.

Every architectural component can be switched off individually; disabled
slots fall back to plain conv stacks at conventional UNet widths so the
all-off configuration is the ablation baseline.  Cost accounting (parameter
and multiply-accumulate counts) walks the same module structure.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
import torch
import torch.nn as nn

from .attention import FeatureContextualizer
from .backbone import PlainConvBlock, PlainFusionBlock
from .blocks import DetailRestorer
from .engine import EngineError, conv_module_macs
from .harmonizer import ScaleHarmonizer
from .prior import PriorExtractor, compute_prior


@dataclass(frozen=True)
class ModelConfig:
    """Widths, depths and ablation switches defining one network instance."""

    base_channels: int = 3
    num_scales: int = 3
    dr_units: int = 6
    maq_blocks: int = 4
    embed_channels: int = 48
    heads: int = 4
    harmonizer_stages: int = 3
    # ablation switches (all on = full model, all off = plain baseline)
    use_prior_guide_fc: bool = True
    use_prior_skip: bool = True
    use_sat: bool = True
    use_act: bool = True
    use_kft: bool = True
    use_rcb: bool = True
    use_nafb: bool = True
    use_sh: bool = True
    use_io_skip: bool = True
    # artifact knobs
    qconv_kernel: int = 3
    ffn_expand: int = 2
    dropout: float = 0.0
    spp_sizes: tuple = (1, 2, 4, 8)
    prior_blocks_per_scale: int = 2
    backbone_width: int = 15
    backbone_enc_convs: int = 6
    backbone_bottleneck_convs: int = 5
    backbone_dec_convs: int = 3

    def __post_init__(self):
        if self.num_scales < 0:
            raise EngineError(f"num_scales must be >= 0, got {self.num_scales}")
        if (self.use_act or self.use_kft) and not self.use_prior_guide_fc:
            raise EngineError(
                "cross-attention transformers (ACT/KFT) need the prior branch: "
                "enable use_prior_guide_fc or disable use_act/use_kft"
            )

    @property
    def use_dr(self) -> bool:
        return self.use_rcb or self.use_nafb

    @property
    def use_fc(self) -> bool:
        return self.use_sat or self.use_act or self.use_kft

    @property
    def use_prior(self) -> bool:
        return self.use_prior_guide_fc or self.use_prior_skip

    @property
    def encoder_widths(self) -> list:
        base = self.base_channels if self.use_dr else self.backbone_width
        return [base * 2**s for s in range(self.num_scales)]

    @property
    def bottleneck_width(self) -> int:
        if self.use_fc:
            return self.embed_channels
        return self.backbone_width * 2**self.num_scales

    @property
    def decoder_widths(self) -> list:
        return [max(self.bottleneck_width // 2**i, 1) for i in range(self.num_scales)]

    @property
    def prior_widths(self) -> list:
        return [self.base_channels * 2**s for s in range(self.num_scales)]

    @property
    def divisibility(self) -> int:
        return 2 ** max(self.num_scales - 1, 0)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["spp_sizes"] = list(self.spp_sizes)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        if "spp_sizes" in d:
            d["spp_sizes"] = tuple(d["spp_sizes"])
        return ModelConfig(**d)


class Restorer(nn.Module):
    """The restoration network built from a :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        widths = cfg.encoder_widths
        # detail blocks are shape-preserving; widen the image first if needed
        self.stem = (
            nn.Conv2d(3, widths[0], 1)
            if cfg.num_scales and cfg.use_dr and widths[0] != 3
            else None
        )
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        for s, width in enumerate(widths):
            if cfg.use_dr:
                self.encoders.append(
                    DetailRestorer(
                        width,
                        units=cfg.dr_units,
                        use_rcb=cfg.use_rcb,
                        use_nafb=cfg.use_nafb,
                        qconv_kernel=cfg.qconv_kernel,
                        dropout=cfg.dropout,
                    )
                )
            else:
                # downsampling already doubled the width for scales > 0
                in_ch = 3 if s == 0 else width
                self.encoders.append(PlainConvBlock(in_ch, width, cfg.backbone_enc_convs))
            if s + 1 < len(widths):
                self.downs.append(nn.Conv2d(width, widths[s + 1], 3, stride=2, padding=1))

        if cfg.num_scales == 0:
            self.bottleneck = None
            self.prior_extractor = None
            self.ups = nn.ModuleList()
            self.decoders = nn.ModuleList()
            self.head = None
            return

        if cfg.use_fc:
            self.bottleneck = FeatureContextualizer(
                in_channels=widths[-1],
                channels=cfg.embed_channels,
                blocks=cfg.maq_blocks,
                heads=cfg.heads,
                use_act=cfg.use_act,
                use_kft=cfg.use_kft,
                use_sat=cfg.use_sat,
                qconv_kernel=cfg.qconv_kernel,
                ffn_expand=cfg.ffn_expand,
                spp_sizes=cfg.spp_sizes,
            )
        else:
            self.bottleneck = PlainConvBlock(
                widths[-1], cfg.bottleneck_width, cfg.backbone_bottleneck_convs
            )

        if cfg.use_prior:
            self.prior_extractor = PriorExtractor(
                widths=cfg.prior_widths,
                embed_channels=cfg.embed_channels,
                blocks_per_scale=cfg.prior_blocks_per_scale,
                dropout=cfg.dropout,
            )
        else:
            self.prior_extractor = None

        dec_widths = cfg.decoder_widths
        self.ups = nn.ModuleList(
            nn.Conv2d(dec_widths[i - 1], dec_widths[i], 1) for i in range(1, cfg.num_scales)
        )
        self.decoders = nn.ModuleList()
        up_ch = cfg.bottleneck_width
        for i in range(cfg.num_scales):
            skip_ch = widths[cfg.num_scales - 1 - i]
            if i == cfg.num_scales - 1 and cfg.use_prior_skip:
                skip_ch += cfg.prior_widths[0]
            if i > 0:
                up_ch = dec_widths[i]
            if cfg.use_sh:
                self.decoders.append(
                    ScaleHarmonizer(skip_ch, up_ch, dec_widths[i], cfg.harmonizer_stages)
                )
            else:
                self.decoders.append(
                    PlainFusionBlock(skip_ch, up_ch, dec_widths[i], cfg.backbone_dec_convs)
                )
        self.head = nn.Conv2d(dec_widths[-1], 3, 3, padding=1)

    def _check_input(self, img: torch.Tensor) -> None:
        if img.dim() != 4 or img.shape[1] != 3:
            raise EngineError(f"expected an (N, 3, H, W) image, got {tuple(img.shape)}")
        div = self.cfg.divisibility
        h, w = img.shape[-2:]
        if h % div or w % div:
            raise EngineError(
                f"spatial dims must be divisible by {div} for {self.cfg.num_scales} "
                f"scales, got {h}x{w}"
            )

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        self._check_input(img)
        cfg = self.cfg
        if cfg.num_scales == 0:
            return img if self.training else img.clamp(0.0, 1.0)

        prior_top = prior_bot = None
        if self.prior_extractor is not None:
            pack = self.prior_extractor(compute_prior(img))
            prior_top, prior_bot = pack.top_feat, pack.bottleneck_feat

        skips = []
        x = img if self.stem is None else self.stem(img)
        for s, enc in enumerate(self.encoders):
            x = enc(x)
            skips.append(x)
            if s < len(self.downs):
                x = self.downs[s](x)

        if cfg.use_fc:
            x = self.bottleneck(x, prior_bot if cfg.use_prior_guide_fc else None)
        else:
            x = self.bottleneck(x)

        for i, dec in enumerate(self.decoders):
            skip = skips[cfg.num_scales - 1 - i]
            if i > 0:
                x = torch.nn.functional.interpolate(
                    x, size=skip.shape[-2:], mode="bilinear", align_corners=False
                )
                x = self.ups[i - 1](x)
            if i == cfg.num_scales - 1 and cfg.use_prior_skip:
                skip = torch.cat([skip, prior_top], dim=1)
            x = dec(skip, x)

        out = self.head(x)
        if cfg.use_io_skip:
            out = out + img
        if not self.training:
            out = out.clamp(0.0, 1.0)
        return out

    def macs(self, h: int, w: int) -> int:
        """Analytic multiply-accumulate count of one forward at (1, 3, h, w).

        Counts convolution and matrix-multiply multiplies only; element-wise
        work, normalizations and resampling are excluded.
        """
        cfg = self.cfg
        if cfg.num_scales == 0:
            return 0
        total = 0
        if self.prior_extractor is not None:
            total += self.prior_extractor.macs(h, w)
        if self.stem is not None:
            total += conv_module_macs(self.stem, h, w)
        sh, sw = h, w
        sizes = []
        for s, enc in enumerate(self.encoders):
            total += enc.macs(sh, sw)
            sizes.append((sh, sw))
            if s < len(self.downs):
                total += conv_module_macs(self.downs[s], sh, sw)
                sh, sw = (sh + 1) // 2, (sw + 1) // 2
        total += self.bottleneck.macs(sh, sw)
        for i, dec in enumerate(self.decoders):
            dh, dw = sizes[cfg.num_scales - 1 - i]
            if i > 0:
                total += conv_module_macs(self.ups[i - 1], dh, dw)
            total += dec.macs(dh, dw)
        total += conv_module_macs(self.head, h, w)
        return total


def count_params(cfg: ModelConfig) -> int:
    """Total trainable scalar count of one network instance."""
    model = Restorer(cfg)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def count_macs(cfg: ModelConfig, h: int, w: int) -> int:
    """Analytic MACs for one forward pass at (1, 3, h, w)."""
    return Restorer(cfg).macs(h, w)


_ALL_SWITCHES = dict(
    use_prior_guide_fc=False,
    use_prior_skip=False,
    use_sat=False,
    use_act=False,
    use_kft=False,
    use_rcb=False,
    use_nafb=False,
    use_sh=False,
    use_io_skip=False,
)


def ablate(cfg: ModelConfig, switches: dict) -> ModelConfig:
    """Derive an ablation config; invalid switch combinations raise."""
    unknown = set(switches) - set(_ALL_SWITCHES)
    if unknown:
        raise EngineError(f"unknown ablation switches: {sorted(unknown)}")
    return dataclasses.replace(cfg, **switches)


def baseline_config(cfg: ModelConfig = ModelConfig()) -> ModelConfig:
    """The all-switches-off plain UNet baseline."""
    return ablate(cfg, dict(_ALL_SWITCHES))


# Ablation study rows: (name, switches applied on top of the all-off baseline)
ABLATION_ROWS = [
    ("baseline", {}),
    ("sat", dict(use_sat=True)),
    ("sat+act+prior", dict(use_sat=True, use_act=True, use_prior_guide_fc=True)),
    ("fc+prior", dict(use_sat=True, use_act=True, use_kft=True, use_prior_guide_fc=True)),
    ("rcb", dict(use_rcb=True)),
    ("dr", dict(use_rcb=True, use_nafb=True)),
    (
        "fc+dr+prior",
        dict(
            use_sat=True, use_act=True, use_kft=True, use_prior_guide_fc=True,
            use_rcb=True, use_nafb=True,
        ),
    ),
    ("sh", dict(use_sh=True)),
    (
        "fc+dr+sh+prior",
        dict(
            use_sat=True, use_act=True, use_kft=True, use_prior_guide_fc=True,
            use_rcb=True, use_nafb=True, use_sh=True,
        ),
    ),
    (
        "fc+dr+sh+prior+prior_skip",
        dict(
            use_sat=True, use_act=True, use_kft=True, use_prior_guide_fc=True,
            use_prior_skip=True, use_rcb=True, use_nafb=True, use_sh=True,
        ),
    ),
    (
        "full",
        dict(
            use_sat=True, use_act=True, use_kft=True, use_prior_guide_fc=True,
            use_prior_skip=True, use_rcb=True, use_nafb=True, use_sh=True,
            use_io_skip=True,
        ),
    ),
]


def ablation_config(row: str, cfg: ModelConfig = ModelConfig()) -> ModelConfig:
    """Config for one named ablation row."""
    for name, switches in ABLATION_ROWS:
        if name == row:
            merged = dict(_ALL_SWITCHES)
            merged.update(switches)
            return ablate(cfg, merged)
    raise EngineError(f"unknown ablation row {row!r}; known: {[n for n, _ in ABLATION_ROWS]}")
