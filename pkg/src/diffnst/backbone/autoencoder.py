"""Convolutional image autoencoder mapping [0,1] rasters to diffusion latents."""

import math

import torch
from torch import nn
from torch.nn import functional as F

from .config import BackboneConfig


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = _norm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class ImageAutoencoder(nn.Module):
    """Strided conv encoder / upsampling decoder with a sigmoid output squash.

    ``latent_scale`` is a buffer calibrated during pretraining so latents are
    roughly unit variance for the denoiser; it is part of the frozen weights.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        stages = int(math.log2(config.downsample_factor))
        base = config.unet_channel_widths[0]
        widths = [base * (2 ** i) for i in range(stages)]

        enc: list[nn.Module] = [nn.Conv2d(3, widths[0], 3, padding=1)]
        for i in range(stages):
            enc.append(ResidualBlock(widths[i]))
            out_ch = widths[i + 1] if i + 1 < stages else widths[-1]
            enc.append(nn.Conv2d(widths[i], out_ch, 3, stride=2, padding=1))
        enc += [ResidualBlock(widths[-1]), _norm(widths[-1]), nn.SiLU(),
                nn.Conv2d(widths[-1], config.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(config.latent_channels, widths[-1], 3, padding=1),
                                ResidualBlock(widths[-1])]
        for i in reversed(range(stages)):
            dec.append(nn.Upsample(scale_factor=2, mode="nearest"))
            dec.append(nn.Conv2d(widths[i + 1] if i + 1 < stages else widths[-1],
                                 widths[i], 3, padding=1))
            dec.append(ResidualBlock(widths[i]))
        dec += [_norm(widths[0]), nn.SiLU(), nn.Conv2d(widths[0], 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """images: [B, 3, H, W] in [0, 1] -> latents [B, C, H/f, W/f]."""
        return self.encoder(images * 2.0 - 1.0) * self.latent_scale

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        """latents -> images [B, 3, H, W] squashed into [0, 1]."""
        return torch.sigmoid(self.decoder(latents / self.latent_scale))
