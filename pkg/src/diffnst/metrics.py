"""Quantitative evaluation: single-image Frechet distance over deep features,
Chamfer color distance, and an LPIPS-role perceptual distance.

All three are non-negative, symmetric, and zero at identity. The feature
space is the repo's shared extractor, so absolute values are not comparable
to Inception-based numbers.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import linalg as scipy_linalg
from scipy.spatial import cKDTree

from .imageops import load_image
from .losses import FeatureExtractor

DEFAULT_CHAMFER_SAMPLES = 4096
SIFID_LAYER = 1  # 16x16 map at 64px input: 256 locations per feature vector


def _location_features(extractor: FeatureExtractor, image: torch.Tensor,
                       layer: int) -> np.ndarray:
    feat = extractor.features(image)[layer]
    return feat.reshape(feat.shape[0], -1).T.detach().cpu().numpy().astype(np.float64)


def _gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / features.shape[0]
    return mean, 0.5 * (cov + cov.T)


def _psd_clamp(matrix: np.ndarray) -> np.ndarray:
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    return (vecs * np.clip(vals, 0.0, None)) @ vecs.T


def sifid(a: torch.Tensor, b: torch.Tensor, extractor: FeatureExtractor,
          layer: int = SIFID_LAYER) -> float:
    """Frechet distance between per-location feature Gaussians of two images."""
    mu_a, cov_a = _gaussian_stats(_location_features(extractor, a, layer))
    mu_b, cov_b = _gaussian_stats(_location_features(extractor, b, layer))
    cov_a = _psd_clamp(cov_a)
    cov_b = _psd_clamp(cov_b)
    sqrt_ab, _ = scipy_linalg.sqrtm(cov_a @ cov_b, disp=False)
    if np.iscomplexobj(sqrt_ab):
        sqrt_ab = sqrt_ab.real
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(sqrt_ab))
    return max(value, 0.0)


def chamfer_color(a: torch.Tensor, b: torch.Tensor,
                  sample_n: int = DEFAULT_CHAMFER_SAMPLES, seed: int = 0) -> float:
    """Symmetric average nearest-neighbor RGB distance between pixel samples.

    Returns the mean of the two directed averages, so identical color sets
    score 0 and pure red vs pure blue scores sqrt(2).
    """
    pixels_a = a.reshape(-1, 3).detach().cpu().numpy().astype(np.float64)
    pixels_b = b.reshape(-1, 3).detach().cpu().numpy().astype(np.float64)
    rng = np.random.default_rng(seed)

    def sample(pixels):
        if sample_n >= pixels.shape[0]:
            return pixels
        idx = rng.choice(pixels.shape[0], size=sample_n, replace=False)
        return pixels[idx]

    sa, sb = sample(pixels_a), sample(pixels_b)
    d_ab, _ = cKDTree(sb).query(sa, k=1)
    d_ba, _ = cKDTree(sa).query(sb, k=1)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def perceptual_distance(a: torch.Tensor, b: torch.Tensor,
                        extractor: FeatureExtractor) -> float:
    """Mean L2 gap between unit-normalized per-location feature vectors."""
    feats_a = extractor.features(a)
    feats_b = extractor.features(b)
    per_layer = []
    for fa, fb in zip(feats_a, feats_b):
        va = torch.nn.functional.normalize(fa.reshape(fa.shape[0], -1), dim=0)
        vb = torch.nn.functional.normalize(fb.reshape(fb.shape[0], -1), dim=0)
        per_layer.append(torch.linalg.vector_norm(va - vb, dim=0).mean())
    return float(torch.stack(per_layer).mean())


@dataclass
class MetricReport:
    pairs: list[dict] = field(default_factory=list)
    means: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    skipped: int = 0

    def to_json_dict(self) -> dict:
        return {"pairs": self.pairs, "means": self.means, "config": self.config,
                "skipped": self.skipped}

    def save(self, path: Path | str) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2))


def evaluate_corpus(results_dir: Path | str, extractor: FeatureExtractor | None = None,
                    sample_n: int = DEFAULT_CHAMFER_SAMPLES, seed: int = 0,
                    out_path: Path | str | None = None) -> MetricReport:
    """Score every stylization directory under ``results_dir``.

    Each result directory holds ``stylized.png`` plus ``meta.json`` naming
    the content and style sources; incomplete triples are skipped with a
    warning and counted in the report.
    """
    extractor = extractor or FeatureExtractor()
    results_dir = Path(results_dir)
    report = MetricReport(config={
        "results_dir": str(results_dir),
        "chamfer_samples": sample_n,
        "seed": seed,
        "extractor_channels": list(extractor.channels),
        "sifid_layer": SIFID_LAYER,
    })
    values = {"sifid": [], "chamfer": [], "perceptual": []}
    for pair_dir in sorted(p for p in results_dir.iterdir() if p.is_dir()):
        meta_path = pair_dir / "meta.json"
        stylized_path = pair_dir / "stylized.png"
        if not (meta_path.is_file() and stylized_path.is_file()):
            print(f"warning: skipping incomplete result {pair_dir.name}")
            report.skipped += 1
            continue
        meta = json.loads(meta_path.read_text())
        content_path = Path(meta["content"])
        style_path = Path(meta["style"])
        if not (content_path.is_file() and style_path.is_file()):
            print(f"warning: skipping {pair_dir.name}: missing source images")
            report.skipped += 1
            continue
        stylized = load_image(stylized_path)
        size = stylized.shape[0]
        content = load_image(content_path, size=size)
        style = load_image(style_path, size=size)
        pair_seed = seed + len(report.pairs)
        entry = {
            "id": pair_dir.name,
            "content": str(content_path),
            "style": str(style_path),
            "sifid": sifid(stylized, style, extractor),
            "chamfer": chamfer_color(stylized, style, sample_n=sample_n, seed=pair_seed),
            "perceptual": perceptual_distance(stylized, content, extractor),
        }
        report.pairs.append(entry)
        for key in values:
            values[key].append(entry[key])
    report.means = {key: (float(np.mean(vals)) if vals else 0.0)
                    for key, vals in values.items()}
    if out_path is not None:
        report.save(out_path)
    return report
