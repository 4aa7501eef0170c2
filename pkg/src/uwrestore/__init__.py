"""Underwater image restoration with a color-balance-prior-guided network."""

from .model import ModelConfig, Restorer, ablate, baseline_config, count_macs, count_params
from .prior import channel_means, compute_prior

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "Restorer",
    "ablate",
    "baseline_config",
    "count_macs",
    "count_params",
    "compute_prior",
    "channel_means",
    "__version__",
]
