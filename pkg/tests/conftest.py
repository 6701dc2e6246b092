import pytest
import torch

from diffnst.backbone import Backbone, BackboneConfig
from diffnst.toydata import write_corpus

TINY = dict(image_size=32, unet_channel_widths=[16, 24], attention_head_count=2,
            sampling_steps=6, train_timesteps=100)


def rand_image(seed: int, size: int = 32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(size, size, 3, generator=gen)


def rand_latent(seed: int, shape, scale: float = 0.5) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=gen) * scale


@pytest.fixture(scope="session")
def tiny_config():
    return BackboneConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_backbone(tiny_config):
    return Backbone(tiny_config, seed=0)


@pytest.fixture(scope="session")
def toy_corpus_32(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus32")
    write_corpus(root / "content", 10, "content", seed=11, size=32)
    write_corpus(root / "style", 10, "style", seed=12, size=32)
    return root


@pytest.fixture(scope="session")
def tiny_backbone_dir(tmp_path_factory, tiny_backbone):
    directory = tmp_path_factory.mktemp("tiny_backbone")
    tiny_backbone.save(directory)
    return directory
