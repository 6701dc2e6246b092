"""Pixel-space preprocessing: color moment matching, Sobel maps, guided crops.

Images are [H, W, 3] float tensors in [0, 1]. Everything here is a pure
function; ``sobel_map`` is differentiable so gradients can flow through
crop/map pairs fed to the patch discriminator.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .errors import ConfigurationError

COVARIANCE_EPS = 1e-5

# Rec. 601 luma weights.
_LUMA = (0.299, 0.587, 0.114)

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


@dataclass
class ColorStats:
    """Per-image RGB mean (3,) and population covariance (3, 3)."""

    mean: torch.Tensor
    covariance: torch.Tensor

    @classmethod
    def of(cls, image: torch.Tensor) -> "ColorStats":
        pixels = image.reshape(-1, 3)
        mean = pixels.mean(dim=0)
        centered = pixels - mean
        cov = centered.T @ centered / pixels.shape[0]
        return cls(mean=mean, covariance=0.5 * (cov + cov.T))


def _sqrt_psd(matrix: torch.Tensor) -> torch.Tensor:
    vals, vecs = torch.linalg.eigh(matrix)
    return vecs @ torch.diag(vals.clamp(min=0.0).sqrt()) @ vecs.T


def _inv_sqrt_psd(matrix: torch.Tensor, eps: float = COVARIANCE_EPS) -> torch.Tensor:
    # Near-singular directions carry no data variance; regularise only those.
    vals, vecs = torch.linalg.eigh(matrix)
    inv = torch.where(vals > eps, vals, vals + eps).clamp(min=eps).rsqrt()
    return vecs @ torch.diag(inv) @ vecs.T


def match_colors(content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
    """Map content pixels so their RGB moments match the style image's.

    Per pixel: ``clamp(A @ (x - mean_c) + mean_s)`` with
    ``A = cov_s^(1/2) @ cov_c^(-1/2)`` built from principal square roots.
    """
    if not (torch.isfinite(content).all() and torch.isfinite(style).all()):
        raise ConfigurationError("match_colors requires finite inputs")
    stats_c = ColorStats.of(content)
    stats_s = ColorStats.of(style)
    transform = _sqrt_psd(stats_s.covariance) @ _inv_sqrt_psd(stats_c.covariance)
    flat = (content.reshape(-1, 3) - stats_c.mean) @ transform.T + stats_s.mean
    return flat.reshape(content.shape).clamp(0.0, 1.0)


def luma(image: torch.Tensor) -> torch.Tensor:
    return (image[..., 0] * _LUMA[0] + image[..., 1] * _LUMA[1] + image[..., 2] * _LUMA[2])


def sobel_map(image: torch.Tensor) -> torch.Tensor:
    """Gradient magnitude of the standard 3x3 Sobel pair on the luma channel.

    Borders are replicate-padded, so constant images map to exactly zero.
    """
    gray = luma(image)[None, None]
    padded = torch.nn.functional.pad(gray, (1, 1, 1, 1), mode="replicate")
    kx = _SOBEL_X.to(image.dtype)[None, None]
    ky = _SOBEL_X.T.to(image.dtype)[None, None]
    gx = torch.nn.functional.conv2d(padded, kx)
    gy = torch.nn.functional.conv2d(padded, ky)
    # Tiny epsilon keeps sqrt differentiable at zero; the offset restores an
    # exact zero on constant inputs.
    eps = torch.as_tensor(1e-24, dtype=gx.dtype)
    mag = torch.sqrt(gx * gx + gy * gy + eps) - torch.sqrt(eps)
    return mag.squeeze(0).squeeze(0)


@dataclass(frozen=True)
class Crop:
    top: int
    left: int
    size: int


def _candidate_crops(height: int, width: int, size: int, count: int,
                     gen: torch.Generator) -> list[Crop]:
    tops = torch.randint(0, height - size + 1, (count,), generator=gen)
    lefts = torch.randint(0, width - size + 1, (count,), generator=gen)
    return [Crop(int(t), int(l), size) for t, l in zip(tops, lefts)]


def sample_crops(image: torch.Tensor, sobel: torch.Tensor, n: int, size: int,
                 bin: str, seed: int, candidates: int = 64,
                 return_positions: bool = False):
    """Draw ``n`` crops whose mean Sobel magnitude sits in the requested bin.

    ``simple`` keeps the bottom quartile of candidate scores, ``complex`` the
    top quartile. Ties (e.g. constant images) fall back to seed order.
    """
    height, width = image.shape[0], image.shape[1]
    if size > min(height, width):
        raise ConfigurationError(f"crop size {size} exceeds image {height}x{width}")
    if n < 1:
        raise ConfigurationError("need n >= 1")
    if bin not in ("simple", "complex"):
        raise ConfigurationError(f"unknown bin {bin!r}")
    gen = torch.Generator().manual_seed(seed)
    cands = _candidate_crops(height, width, size, max(candidates, 4 * n), gen)
    with torch.no_grad():  # bin selection is not part of the gradient path
        scores = torch.tensor([float(sobel[c.top:c.top + c.size,
                                           c.left:c.left + c.size].mean())
                               for c in cands])
    order = torch.argsort(scores, stable=True)
    quartile = max(n, len(cands) // 4)
    chosen = order[:quartile] if bin == "simple" else order[-quartile:].flip(0)
    picks = [cands[int(i)] for i in chosen[:n]]
    crops = [image[c.top:c.top + c.size, c.left:c.left + c.size] for c in picks]
    if return_positions:
        return crops, picks
    return crops


def crop_scores(sobel: torch.Tensor, crops: list[Crop]) -> list[float]:
    return [float(sobel[c.top:c.top + c.size, c.left:c.left + c.size].mean()) for c in crops]


# -- PNG IO -------------------------------------------------------------------


def load_image(path: Path | str, size: int | None = None) -> torch.Tensor:
    """Read an 8-bit PNG/JPEG as a [H, W, 3] float tensor in [0, 1]."""
    img = PILImage.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), PILImage.BICUBIC)
    return torch.from_numpy(np.asarray(img).astype(np.float32) / 255.0)


def save_image(image: torch.Tensor, path: Path | str) -> None:
    """Write a [H, W, 3] float tensor in [0, 1] as an 8-bit PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    array = (image.detach().clamp(0, 1).cpu().numpy() * 255.0).round().astype(np.uint8)
    PILImage.fromarray(array).save(path)


def resize_image(image: torch.Tensor, size: int) -> torch.Tensor:
    """Bicubic resize to ``size`` x ``size`` (used to align style token grids)."""
    if image.shape[0] == size and image.shape[1] == size:
        return image
    nchw = image.permute(2, 0, 1)[None]
    out = torch.nn.functional.interpolate(nchw, size=(size, size), mode="bicubic",
                                          align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).clamp(0.0, 1.0)
