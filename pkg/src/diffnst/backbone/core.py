"""Backbone facade: autoencoder + noise UNet + schedule, with checkpoint IO.

Weights are frozen after pretraining; a frozen backbone is immutable and safe
for concurrent read-only inference. Hook sets are per-invocation state.
"""

import hashlib
import json
from pathlib import Path
from typing import Sequence

import torch

from .. import tensorio
from ..errors import ConfigurationError
from .autoencoder import ImageAutoencoder
from .config import AttentionSite, BackboneConfig, DiffusionSchedule, attention_site_plan
from .unet import AttentionHook, HookContext, NoiseUNet

CHECKPOINT_FORMAT_VERSION = 1


def _to_nchw(image: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if image.dim() == 3:
        return image.permute(2, 0, 1).unsqueeze(0), False
    if image.dim() == 4:
        return image.permute(0, 3, 1, 2), True
    raise ConfigurationError(f"expected [H,W,3] or [B,H,W,3], got {tuple(image.shape)}")


class Backbone:
    """Miniature latent-diffusion backbone with a stable attention-hook surface."""

    def __init__(self, config: BackboneConfig, seed: int = 0, frozen: bool = True):
        self.config = config
        self.schedule = DiffusionSchedule.for_config(config)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.autoencoder = ImageAutoencoder(config)
            self.unet = NoiseUNet(config)
        self.sites = attention_site_plan(config)
        self._site_ids = {s.site_id for s in self.sites}
        self.frozen = False
        if frozen:
            self.freeze()

    def freeze(self) -> None:
        for module in (self.autoencoder, self.unet):
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)
        self.frozen = True

    # -- core ops -----------------------------------------------------------

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        nchw, batched = _to_nchw(image)
        if nchw.shape[1] != 3 or nchw.shape[2] != self.config.image_size \
                or nchw.shape[3] != self.config.image_size:
            raise ConfigurationError(
                f"image shape {tuple(image.shape)} does not match image_size="
                f"{self.config.image_size}")
        latent = self.autoencoder.encode(nchw)
        return latent if batched else latent.squeeze(0)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        batched = latent.dim() == 4
        z = latent if batched else latent.unsqueeze(0)
        if tuple(z.shape[1:]) != self.config.latent_shape:
            raise ConfigurationError(
                f"latent shape {tuple(latent.shape)} does not match {self.config.latent_shape}")
        image = self.autoencoder.decode(z).permute(0, 2, 3, 1)
        return image if batched else image.squeeze(0)

    def predict_noise(self, latent: torch.Tensor, step: int,
                      hooks: Sequence[AttentionHook] | None = None,
                      schedule: DiffusionSchedule | None = None) -> torch.Tensor:
        """Unconditional noise prediction at reverse sampling step ``step``.

        ``schedule`` defaults to the backbone's own grid; samplers running on
        a subsampled grid pass theirs so the train timestep stays consistent.
        """
        sched = schedule or self.schedule
        tau = sched.timestep_for_step(step)
        ctx = HookContext(hooks, self.sites) if hooks else None
        batched = latent.dim() == 4
        z = latent if batched else latent.unsqueeze(0)
        if tuple(z.shape[1:]) != self.config.latent_shape:
            raise ConfigurationError(
                f"latent shape {tuple(latent.shape)} does not match {self.config.latent_shape}")
        t = torch.full((z.shape[0],), tau, dtype=torch.float32)
        eps = self.unet(z, t, step, ctx)
        return eps if batched else eps.squeeze(0)

    def enumerate_attention_sites(self) -> list[AttentionSite]:
        return list(self.sites)

    def decoder_sites(self) -> list[AttentionSite]:
        return [s for s in self.sites if s.is_decoder]

    # -- identity -----------------------------------------------------------

    def _state_dict(self) -> dict[str, torch.Tensor]:
        state = {}
        for prefix, module in (("autoencoder", self.autoencoder), ("unet", self.unet)):
            for name, tensor in module.state_dict().items():
                state[f"{prefix}.{name}"] = tensor
        return state

    def parameter_checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self._state_dict()):
            tensor = self._state_dict()[name]
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().to(torch.float32).numpy().tobytes())
        return digest.hexdigest()

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(json.dumps(self.config.to_json_dict(), sort_keys=True).encode())
        digest.update(self.parameter_checksum().encode())
        return digest.hexdigest()

    # -- persistence --------------------------------------------------------

    def save(self, directory: Path | str) -> None:
        directory = Path(directory)
        index = tensorio.save_named_tensors(directory, self._state_dict())
        tensorio.write_manifest(directory, {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "backbone",
            "config": self.config.to_json_dict(),
            "tensors": index,
        })

    @classmethod
    def load(cls, directory: Path | str) -> "Backbone":
        manifest = tensorio.read_manifest(Path(directory))
        if manifest.get("kind") != "backbone":
            raise ConfigurationError(f"{directory} is not a backbone checkpoint")
        config = BackboneConfig.from_json_dict(manifest["config"])
        backbone = cls(config, frozen=False)
        tensors = tensorio.load_named_tensors(Path(directory), manifest["tensors"])
        ae_state = {k.split(".", 1)[1]: v for k, v in tensors.items()
                    if k.startswith("autoencoder.")}
        unet_state = {k.split(".", 1)[1]: v for k, v in tensors.items() if k.startswith("unet.")}
        backbone.autoencoder.load_state_dict(ae_state)
        backbone.unet.load_state_dict(unet_state)
        backbone.freeze()
        return backbone
