from .config import (AttentionSite, BackboneConfig, DiffusionSchedule,
                     attention_site_plan)
from .core import Backbone
from .unet import AttentionHook, HookContext

__all__ = ["AttentionSite", "AttentionHook", "Backbone", "BackboneConfig",
           "DiffusionSchedule", "HookContext", "attention_site_plan"]
