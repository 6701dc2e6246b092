"""Trainable V-value hijack: per-site MLPs that synthesize replacement
attention values from the content V, the style V at the same site and step,
and the global style code.

Only decoder-half sites get an MLP. Each MLP is shared across tokens and
applied per token, so parameter count is independent of resolution and the
content/style pairing is strictly one-to-one in token space. With the
residual path and a zero-initialised final layer the hijack is an exact
identity at initialisation.
"""

from typing import Callable

import torch
from torch import nn

from .backbone import AttentionSite
from .diffusion import AttentionPolicy, AttentionTrace
from .errors import (ConfigurationError, ResolutionMismatchError,
                     TraceIncompleteError)
from .style_embed import StyleCode

__all__ = ["AttentionTrace", "HijackMLP", "HijackSet", "build_hijack", "wire_policy"]


def _module_key(site_id: str) -> str:
    return site_id.replace(".", "_")


class HijackMLP(nn.Module):
    """Token-wise MLP for one attention site."""

    def __init__(self, v_dim: int, code_dim: int, hidden: list[int] | None = None,
                 residual: bool = True, zero_init: bool = True):
        super().__init__()
        self.v_dim = v_dim
        self.residual = residual
        hidden = hidden if hidden is not None else [2 * v_dim]
        dims = [2 * v_dim + code_dim] + list(hidden) + [v_dim]
        layers: list[nn.Module] = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers.append(nn.SiLU())
        self.net = nn.Sequential(*layers)
        if zero_init:
            final = self.net[-1]
            with torch.no_grad():
                final.weight.zero_()
                final.bias.zero_()

    def forward(self, content_v: torch.Tensor, style_v: torch.Tensor,
                code: torch.Tensor) -> torch.Tensor:
        """content_v, style_v: [..., tokens, v]; code: [code_dim]."""
        broadcast = code.expand(*content_v.shape[:-1], code.shape[-1])
        out = self.net(torch.cat([content_v, style_v, broadcast], dim=-1))
        return content_v + out if self.residual else out


class HijackSet(nn.Module):
    """One :class:`HijackMLP` per decoder-half attention site."""

    def __init__(self, sites: list[AttentionSite], code_dim: int,
                 hidden: list[int] | None = None, residual: bool = True,
                 zero_init: bool = True):
        super().__init__()
        decoder_sites = [s for s in sites if s.is_decoder]
        if not decoder_sites:
            raise ConfigurationError("site list contains no decoder-half attention sites")
        self.code_dim = code_dim
        self.sites = {s.site_id: s for s in decoder_sites}
        self.mlps = nn.ModuleDict({
            _module_key(s.site_id): HijackMLP(s.v_dim, code_dim, hidden=hidden,
                                              residual=residual, zero_init=zero_init)
            for s in decoder_sites})

    @property
    def site_ids(self) -> set[str]:
        return set(self.sites)

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def hijack_v(self, site_id: str, step: int, content_v: torch.Tensor,
                 style_trace: AttentionTrace, code: StyleCode) -> torch.Tensor:
        """Synthesize replacement V values for one site at one step."""
        if site_id not in self.sites:
            raise ConfigurationError(f"{site_id!r} is not a decoder hijack site")
        if (site_id, step) not in style_trace.entries:
            raise TraceIncompleteError(
                f"style trace has no entry for ({site_id!r}, step {step})")
        style_v = style_trace.get(site_id, step).to(content_v.dtype)
        tokens = content_v.shape[-2]
        if style_v.shape[-2] != tokens or style_v.shape[-1] != content_v.shape[-1]:
            raise ResolutionMismatchError(
                f"token grids disagree at {site_id!r}: content {tuple(content_v.shape[-2:])} "
                f"vs style {tuple(style_v.shape[-2:])}; resize the style image upstream")
        if content_v.dim() == 3:  # broadcast the single-image style trace over batch
            style_v = style_v.expand_as(content_v)
        return self.mlps[_module_key(site_id)](content_v, style_v, code.values)


def build_hijack(sites: list[AttentionSite], code_dim: int,
                 hidden: list[int] | None = None, residual: bool = True,
                 zero_init: bool = True) -> HijackSet:
    return HijackSet(sites, code_dim, hidden=hidden, residual=residual,
                     zero_init=zero_init)


def wire_policy(hijack: HijackSet, style_trace: AttentionTrace, code: StyleCode,
                stop_step: int | None = None,
                summary_sink: dict[int, dict[str, torch.Tensor]] | None = None
                ) -> AttentionPolicy:
    """Attention policy routing decoder sites through the hijack MLPs.

    Non-decoder sites pass through unchanged; the sampler itself gates
    replacement to steps below ``stop_step``. When ``summary_sink`` is given,
    the per-token mean of each synthesized V lands in
    ``summary_sink[step][site_id]`` (gradients intact) for the contrastive
    heads.
    """

    def replace(site_id: str, step: int, v: torch.Tensor) -> torch.Tensor:
        if site_id not in hijack.sites:
            return v
        new_v = hijack.hijack_v(site_id, step, v, style_trace, code)
        if summary_sink is not None:
            summary_sink.setdefault(step, {})[site_id] = new_v.mean(dim=-2).reshape(-1)
        return new_v

    return AttentionPolicy.replace(replace, stop_step=stop_step)


def pooled_attention_vector(summary_sink: dict[int, dict[str, torch.Tensor]],
                            site_order: list[str]) -> torch.Tensor:
    """Pool a summary sink into one vector: concat sites, then mean over steps."""
    if not summary_sink:
        raise ConfigurationError("no attention summaries were collected")
    per_step = []
    for step in sorted(summary_sink):
        sites = summary_sink[step]
        per_step.append(torch.cat([sites[sid] for sid in site_order if sid in sites]))
    return torch.stack(per_step).mean(dim=0)
