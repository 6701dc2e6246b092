"""Deformable neural style transfer over a miniature latent diffusion backbone."""

from .backbone import (AttentionHook, AttentionSite, Backbone, BackboneConfig,
                       DiffusionSchedule)
from .diffusion import (AttentionPolicy, AttentionTrace, DiffusionSampler,
                        InjectionWindow, NoiseTrace)
from .hijack import HijackSet, build_hijack, wire_policy
from .losses import LossConfig, LossWeights, StylizationBatch, total_loss
from .pipeline import StylizationPipeline, StylizeRequest, attention_diff_heatmap
from .style_embed import FeatureStatsEncoder, StyleCode, StyleEncoder

__version__ = "0.1.0"

__all__ = [
    "AttentionHook", "AttentionPolicy", "AttentionSite", "AttentionTrace",
    "Backbone", "BackboneConfig", "DiffusionSampler", "DiffusionSchedule",
    "FeatureStatsEncoder", "HijackSet", "InjectionWindow", "LossConfig",
    "LossWeights", "NoiseTrace", "StylizationBatch", "StylizationPipeline",
    "StyleCode", "StyleEncoder", "StylizeRequest", "attention_diff_heatmap",
    "build_hijack", "total_loss", "wire_policy",
]
