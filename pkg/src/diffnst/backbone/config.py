"""Backbone configuration, diffusion schedule, and the attention-site plan.

Step-index convention used across the whole package: a *sampling step* ``s``
counts reverse-diffusion iterations, so ``s = 0`` operates at the noisiest
train timestep and ``s = T - 1`` at the cleanest. Inversion visits the same
transitions in the opposite order and records against the same ``s`` keys,
which keeps noise and attention traces aligned between the two directions.
"""

from dataclasses import dataclass, field

import torch

from ..errors import ConfigurationError

SCHEDULE_BETA_START = 1e-4
SCHEDULE_BETA_END = 0.02


@dataclass
class BackboneConfig:
    image_size: int = 64
    latent_channels: int = 4
    downsample_factor: int = 4
    unet_channel_widths: list[int] = field(default_factory=lambda: [64, 128, 256])
    attention_head_count: int = 4
    train_timesteps: int = 1000
    sampling_steps: int = 50

    def __post_init__(self):
        levels = len(self.unet_channel_widths)
        if levels < 1:
            raise ConfigurationError("unet_channel_widths must not be empty")
        if self.downsample_factor < 1 or self.downsample_factor & (self.downsample_factor - 1):
            raise ConfigurationError("downsample_factor must be a power of two")
        if self.image_size % self.downsample_factor:
            raise ConfigurationError("image_size must be divisible by downsample_factor")
        if self.image_size % (2 ** (levels - 1)):
            raise ConfigurationError("image_size must be divisible by 2^(levels-1)")
        if self.latent_size % (2 ** (levels - 1)):
            raise ConfigurationError("latent grid must survive per-level downsampling")
        for width in self.unet_channel_widths:
            if width % self.attention_head_count:
                raise ConfigurationError(
                    f"width {width} not divisible by {self.attention_head_count} heads")
            if width % 8:
                raise ConfigurationError(f"width {width} must be divisible by 8 (group norm)")
        if not 1 <= self.sampling_steps <= self.train_timesteps:
            raise ConfigurationError("need 1 <= sampling_steps <= train_timesteps")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample_factor

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_size, self.latent_size)

    @property
    def levels(self) -> int:
        return len(self.unet_channel_widths)

    @property
    def v_dim_per_site(self) -> dict[str, int]:
        return {site.site_id: site.v_dim for site in attention_site_plan(self)}

    def to_json_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "latent_channels": self.latent_channels,
            "downsample_factor": self.downsample_factor,
            "unet_channel_widths": list(self.unet_channel_widths),
            "attention_head_count": self.attention_head_count,
            "v_dim_per_site": self.v_dim_per_site,
            "train_timesteps": self.train_timesteps,
            "sampling_steps": self.sampling_steps,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "BackboneConfig":
        return cls(
            image_size=data["image_size"],
            latent_channels=data["latent_channels"],
            downsample_factor=data["downsample_factor"],
            unet_channel_widths=list(data["unet_channel_widths"]),
            attention_head_count=data["attention_head_count"],
            train_timesteps=data["train_timesteps"],
            sampling_steps=data["sampling_steps"],
        )


@dataclass(frozen=True)
class AttentionSite:
    """One hookable self-attention block in the UNet."""

    site_id: str
    half: str  # "down" (encoder), "mid", or "up" (decoder)
    level: int
    token_count: int
    v_dim: int

    @property
    def is_decoder(self) -> bool:
        return self.half == "up"


def attention_site_plan(config: BackboneConfig) -> list[AttentionSite]:
    """Deterministic enumeration of every self-attention block.

    Order follows UNet execution: down levels ascending, mid, up levels
    descending. The UNet is built from this plan, so site ids are stable for
    a fixed config by construction.
    """
    widths = config.unet_channel_widths
    sites = []
    for level, width in enumerate(widths):
        tokens = (config.latent_size // (2 ** level)) ** 2
        sites.append(AttentionSite(f"down{level}.attn0", "down", level, tokens, width))
    mid_tokens = (config.latent_size // (2 ** (config.levels - 1))) ** 2
    sites.append(AttentionSite("mid.attn0", "mid", config.levels - 1, mid_tokens, widths[-1]))
    for level in reversed(range(config.levels)):
        tokens = (config.latent_size // (2 ** level)) ** 2
        sites.append(AttentionSite(f"up{level}.attn0", "up", level, tokens, widths[level]))
    return sites


class DiffusionSchedule:
    """Linear-beta schedule with an evenly spaced sampling subsequence.

    ``sampling_indices`` are train timesteps in increasing order; transition
    ``j`` connects noise level ``j`` (cleaner) to level ``j + 1`` (noisier)
    and is evaluated at timestep ``sampling_indices[j]``. Level 0 is the data
    itself with cumulative alpha exactly 1.
    """

    def __init__(self, betas: torch.Tensor, sampling_indices: list[int]):
        self.betas = betas.to(torch.float64)
        self.alpha_bars = torch.cumprod(1.0 - self.betas, dim=0)
        self.sampling_indices = [int(i) for i in sampling_indices]
        self._validate()

    @classmethod
    def linear(cls, train_timesteps: int, sampling_steps: int) -> "DiffusionSchedule":
        betas = torch.linspace(SCHEDULE_BETA_START, SCHEDULE_BETA_END, train_timesteps,
                               dtype=torch.float64)
        if sampling_steps == 1:
            indices = [train_timesteps - 1]
        else:
            grid = torch.linspace(0, train_timesteps - 1, sampling_steps)
            indices = [int(round(float(v))) for v in grid]
        return cls(betas, indices)

    @classmethod
    def for_config(cls, config: BackboneConfig) -> "DiffusionSchedule":
        return cls.linear(config.train_timesteps, config.sampling_steps)

    def _validate(self):
        if not torch.all(self.alpha_bars[1:] < self.alpha_bars[:-1]):
            raise ConfigurationError("alpha_bars must be strictly decreasing")
        if self.alpha_bars[0] <= 0.99:
            raise ConfigurationError("alpha_bars[0] must exceed 0.99")
        if torch.any(self.alpha_bars <= 0) or torch.any(self.alpha_bars >= 1):
            raise ConfigurationError("alpha_bars must lie in (0, 1)")
        if any(b >= a for a, b in zip(self.sampling_indices[1:], self.sampling_indices)):
            raise ConfigurationError("sampling_indices must be strictly increasing")
        lo, hi = self.sampling_indices[0], self.sampling_indices[-1]
        if lo < 0 or hi >= len(self.betas):
            raise ConfigurationError("sampling_indices out of train-timestep range")

    @property
    def num_steps(self) -> int:
        return len(self.sampling_indices)

    def alpha_bar_at_level(self, level: int) -> float:
        if level == 0:
            return 1.0
        return float(self.alpha_bars[self.sampling_indices[level - 1]])

    def timestep_for_step(self, step: int) -> int:
        """Train timestep used by reverse sampling step ``step`` (0 = noisiest)."""
        if not 0 <= step < self.num_steps:
            raise ConfigurationError(f"step {step} outside [0, {self.num_steps})")
        return self.sampling_indices[self.num_steps - 1 - step]

    def transition_for_step(self, step: int) -> tuple[float, float]:
        """(noisy-side, clean-side) cumulative alphas for a reverse step."""
        j = self.num_steps - 1 - step
        if not 0 <= j < self.num_steps:
            raise ConfigurationError(f"step {step} outside [0, {self.num_steps})")
        return self.alpha_bar_at_level(j + 1), self.alpha_bar_at_level(j)

    def subsample(self, stride: int) -> "DiffusionSchedule":
        """Every ``stride``-th sampling step, keeping the noisiest one."""
        kept = list(reversed(list(reversed(self.sampling_indices))[::stride]))
        return DiffusionSchedule(self.betas.clone(), kept)

    def grid_key(self) -> str:
        return ",".join(str(i) for i in self.sampling_indices)
