"""Noise-prediction UNet with hookable self-attention blocks.

Every self-attention block reports its pre-head-split Q/K/V token matrices to
an optional :class:`HookContext`; a hook may observe them and/or substitute a
replacement V of identical shape before the attention product is formed.
"""

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from ..errors import HookRegistrationError
from .config import AttentionSite, BackboneConfig, attention_site_plan


@dataclass
class AttentionHook:
    """Per-invocation attention callback set.

    ``observe(site_id, step, q, k, v)`` is passive. ``replace_v(site_id,
    step, v)`` must return a tensor of identical shape. ``sites`` limits the
    hook to specific site ids; ``None`` applies it everywhere.
    """

    observe: Callable | None = None
    replace_v: Callable | None = None
    sites: tuple[str, ...] | None = None


class HookContext:
    """Validated hook set bound to one ``predict_noise`` invocation."""

    def __init__(self, hooks: Sequence[AttentionHook], known_sites: Sequence[AttentionSite]):
        known = {site.site_id for site in known_sites}
        for hook in hooks:
            if hook.sites is None:
                continue
            unknown = [s for s in hook.sites if s not in known]
            if unknown:
                raise HookRegistrationError(f"unknown attention site ids: {unknown}")
        self.hooks = list(hooks)

    def dispatch(self, site_id: str, step: int, q, k, v):
        for hook in self.hooks:
            if hook.sites is not None and site_id not in hook.sites:
                continue
            if hook.observe is not None:
                hook.observe(site_id, step, q, k, v)
            if hook.replace_v is not None:
                new_v = hook.replace_v(site_id, step, v)
                if new_v.shape != v.shape:
                    raise HookRegistrationError(
                        f"replace_v at {site_id} changed shape {tuple(v.shape)} -> "
                        f"{tuple(new_v.shape)}")
                v = new_v
        return v


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(8, channels)


def timestep_embedding(timesteps: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = timesteps.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimeResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class HookableSelfAttention(nn.Module):
    """Multi-head self-attention over the spatial token grid of one level."""

    def __init__(self, channels: int, heads: int, site_id: str):
        super().__init__()
        self.site_id = site_id
        self.heads = heads
        self.norm = _norm(channels)
        self.to_qkv = nn.Linear(channels, channels * 3, bias=False)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x, step: int, ctx: HookContext | None):
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q, k, v = self.to_qkv(tokens).chunk(3, dim=-1)
        if ctx is not None:
            v = ctx.dispatch(self.site_id, step, q, k, v)
        dh = c // self.heads

        def split(t):
            return t.reshape(b, h * w, self.heads, dh).transpose(1, 2)

        attn = torch.softmax(split(q) @ split(k).transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (attn @ split(v)).transpose(1, 2).reshape(b, h * w, c)
        out = self.proj(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class NoiseUNet(nn.Module):
    """Unconditional UNet built from the config's attention-site plan.

    There is no text pathway anywhere: conditioning is the train timestep
    only. The final conv is initialised at small gain so freshly constructed
    backbones predict near-zero noise and stay numerically stable.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        widths = config.unet_channel_widths
        levels = config.levels
        heads = config.attention_head_count
        temb_dim = widths[0] * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(widths[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.temb_input_dim = widths[0]

        self.stem = nn.Conv2d(config.latent_channels, widths[0], 3, padding=1)
        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for level in range(levels):
            self.down_res.append(TimeResBlock(widths[level], widths[level], temb_dim))
            self.down_attn.append(
                HookableSelfAttention(widths[level], heads, f"down{level}.attn0"))
            if level + 1 < levels:
                self.downsamples.append(
                    nn.Conv2d(widths[level], widths[level + 1], 3, stride=2, padding=1))

        self.mid_res1 = TimeResBlock(widths[-1], widths[-1], temb_dim)
        self.mid_attn = HookableSelfAttention(widths[-1], heads, "mid.attn0")
        self.mid_res2 = TimeResBlock(widths[-1], widths[-1], temb_dim)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(levels)):
            self.up_res.append(TimeResBlock(widths[level] * 2, widths[level], temb_dim))
            self.up_attn.append(HookableSelfAttention(widths[level], heads, f"up{level}.attn0"))
            if level > 0:
                self.upsamples.append(nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(widths[level], widths[level - 1], 3, padding=1)))

        self.out_norm = _norm(widths[0])
        self.out_conv = nn.Conv2d(widths[0], config.latent_channels, 3, padding=1)
        with torch.no_grad():
            self.out_conv.weight.mul_(1e-2)
            self.out_conv.bias.zero_()
        self._levels = levels

    def forward(self, z, train_timestep: torch.Tensor, step: int,
                ctx: HookContext | None = None):
        temb = self.time_mlp(timestep_embedding(train_timestep, self.temb_input_dim))
        h = self.stem(z)
        skips = []
        for level in range(self._levels):
            h = self.down_res[level](h, temb)
            h = self.down_attn[level](h, step, ctx)
            skips.append(h)
            if level + 1 < self._levels:
                h = self.downsamples[level](h)

        h = self.mid_res1(h, temb)
        h = self.mid_attn(h, step, ctx)
        h = self.mid_res2(h, temb)

        for i, level in enumerate(reversed(range(self._levels))):
            h = torch.cat([h, skips[level]], dim=1)
            h = self.up_res[i](h, temb)
            h = self.up_attn[i](h, step, ctx)
            if level > 0:
                h = self.upsamples[i](h)

        return self.out_conv(F.silu(self.out_norm(h)))


__all__ = ["AttentionHook", "HookContext", "HookableSelfAttention", "NoiseUNet",
           "attention_site_plan", "AttentionSite", "timestep_embedding"]
