"""Global style codes behind a swappable encoder interface.

The default encoder summarises an image by the per-layer channel means and
standard deviations of the shared feature extractor, linearly projected to a
fixed dimension. Codes carry their encoder id so codes from different
encoders can never be mixed inside one loss.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .errors import EncoderRegistryError
from .losses import FeatureExtractor, feature_mean_std

DEFAULT_CODE_DIM = 256


@dataclass
class StyleCode:
    values: torch.Tensor
    encoder_id: str

    @property
    def dim(self) -> int:
        return int(self.values.shape[-1])


class StyleEncoder(nn.Module):
    """Interface: subclasses implement ``encode(image) -> StyleCode``."""

    encoder_id: str = "abstract"
    trainable: bool = False

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def encode(self, image: torch.Tensor) -> StyleCode:
        raise NotImplementedError


class FeatureStatsEncoder(StyleEncoder):
    """Pooled feature-statistics stand-in for a learned global style embedding.

    Concatenated per-layer channel means and stds are projected to ``dim``
    by a seed-fixed linear map; the projection is frozen unless ``trainable``.
    """

    encoder_id = "feature-stats"

    def __init__(self, extractor: FeatureExtractor, dim: int = DEFAULT_CODE_DIM,
                 trainable: bool = False, seed: int = 77):
        super().__init__()
        self.extractor = extractor
        self._dim = dim
        self.trainable = trainable
        in_dim = 2 * sum(extractor.channels)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.projection = nn.Linear(in_dim, dim)
        if not trainable:
            self.projection.weight.requires_grad_(False)
            self.projection.bias.requires_grad_(False)
            self.eval()

    @property
    def dim(self) -> int:
        return self._dim

    def encode(self, image: torch.Tensor) -> StyleCode:
        stats = []
        for feat in self.extractor.features(image):
            mean, std = feature_mean_std(feat)
            stats.append(mean)
            stats.append(std)
        values = self.projection(torch.cat(stats))
        return StyleCode(values=values, encoder_id=self.encoder_id)


class EncoderRegistry:
    """Name -> constructor registry enabling the embedding-ablation switch."""

    def __init__(self):
        self._encoders: dict[str, StyleEncoder] = {}

    def register(self, encoder: StyleEncoder) -> None:
        if encoder.encoder_id in self._encoders:
            raise EncoderRegistryError(f"encoder id {encoder.encoder_id!r} already registered")
        self._encoders[encoder.encoder_id] = encoder

    def get(self, encoder_id: str) -> StyleEncoder:
        if encoder_id not in self._encoders:
            raise EncoderRegistryError(
                f"no style encoder registered under {encoder_id!r}; "
                f"known: {sorted(self._encoders)}")
        return self._encoders[encoder_id]

    def ids(self) -> list[str]:
        return sorted(self._encoders)


def default_registry(extractor: FeatureExtractor, dim: int = DEFAULT_CODE_DIM,
                     trainable: bool = False) -> EncoderRegistry:
    registry = EncoderRegistry()
    registry.register(FeatureStatsEncoder(extractor, dim=dim, trainable=trainable))
    return registry
