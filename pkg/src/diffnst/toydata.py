"""Procedural toy corpora: smooth "photo" scenes and textured "artwork" fields.

Deterministic per seed. These stand in for real content/style datasets when
exercising the pipeline at desk scale.
"""

from pathlib import Path

import numpy as np

from .imageops import save_image

import torch


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    return ys, xs


def _palette(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(0.05, 0.95, size=(n, 3))


def make_content_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Smooth gradient background with a few soft-edged solid shapes."""
    ys, xs = _grid(size)
    colors = _palette(rng, 2)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xs + np.sin(angle) * ys)
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-9)
    image = colors[0][None, None] * (1 - ramp[..., None]) + colors[1][None, None] * ramp[..., None]

    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.05, 0.95, size=3)
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        radius = rng.uniform(0.08, 0.25)
        if rng.random() < 0.5:
            dist = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
            mask = np.clip((radius - dist) / 0.02, 0, 1)
        else:
            half_h = radius * rng.uniform(0.6, 1.4)
            half_w = radius * rng.uniform(0.6, 1.4)
            dist = np.maximum(np.abs(ys - cy) / half_h, np.abs(xs - cx) / half_w)
            mask = np.clip((1.0 - dist) / 0.05, 0, 1)
        image = image * (1 - mask[..., None]) + color[None, None] * mask[..., None]
    return np.clip(image, 0, 1)


def make_style_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Strongly colored texture field (stripes, checks, dots, or waves)."""
    ys, xs = _grid(size)
    colors = _palette(rng, 3)
    kind = rng.integers(0, 4)
    freq = rng.uniform(2.5, 6.0)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xs + np.sin(angle) * ys
    if kind == 0:  # stripes
        field = 0.5 + 0.5 * np.sin(2 * np.pi * freq * t)
    elif kind == 1:  # checker
        field = ((np.floor(xs * freq) + np.floor(ys * freq)) % 2)
    elif kind == 2:  # dots
        fx = xs * freq % 1.0 - 0.5
        fy = ys * freq % 1.0 - 0.5
        field = (np.sqrt(fx ** 2 + fy ** 2) < rng.uniform(0.2, 0.35)).astype(float)
    else:  # waves
        field = 0.5 + 0.5 * np.sin(2 * np.pi * freq * t + 2.0 * np.sin(2 * np.pi * ys * 1.5))
    base = colors[0][None, None] * (1 - field[..., None]) + colors[1][None, None] * field[..., None]
    wash = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * ys)
    image = base * (1 - 0.25 * wash[..., None]) + colors[2][None, None] * 0.25 * wash[..., None]
    image += rng.normal(0, 0.01, size=image.shape)
    return np.clip(image, 0, 1)


def write_corpus(directory: Path | str, count: int, kind: str, seed: int = 0,
                 size: int = 64) -> list[Path]:
    """Write ``count`` PNGs of the given kind ("content" or "style")."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    maker = make_content_image if kind == "content" else make_style_image
    paths = []
    for i in range(count):
        image = maker(rng, size=size)
        path = directory / f"{kind}_{i:04d}.png"
        save_image(torch.from_numpy(image.astype(np.float32)), path)
        paths.append(path)
    return paths
