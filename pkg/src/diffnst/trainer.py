"""Backbone pretraining and the unrolled style-transfer training loop.

The style trainer never touches backbone weights: it inverts content and
style through the frozen model, replays the content noises over the active
injection window while the hijack MLPs rewrite decoder V values, decodes the
unrolled result, and applies the ten-term objective in pixel space. Only
hijack MLPs, the two discriminators, the projection heads, and (optionally)
the style encoder receive gradient updates.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn
from tqdm import tqdm

from . import tensorio
from .backbone import Backbone, BackboneConfig, DiffusionSchedule
from .diffusion import AttentionPolicy, DiffusionSampler, InjectionWindow
from .errors import ConfigurationError, TraceCompatibilityError
from .hijack import build_hijack, pooled_attention_vector, wire_policy
from .imageops import load_image, match_colors
from .losses import (AttentionSummary, DomainDiscriminator, FeatureExtractor,
                     LossConfig, LossModules, LossWeights, PatchDiscriminator,
                     ProjectionHead, StylizationBatch, adversarial_losses,
                     patch_discriminator_loss, total_loss)
from .style_embed import default_registry

CHECKPOINT_FORMAT_VERSION = 1
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


def list_images(root: Path | str) -> list[Path]:
    root = Path(root)
    paths = sorted(p for p in root.iterdir()
                   if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise ConfigurationError(f"no images found under {root}")
    return paths


# -- backbone pretraining -----------------------------------------------------


@dataclass
class PretrainConfig:
    ae_steps: int = 3000
    denoiser_steps: int = 3000
    batch_size: int = 16
    ae_lr: float = 2e-3
    denoiser_lr: float = 2e-4
    val_fraction: float = 0.1
    recon_mae_gate: float = 0.08
    seed: int = 0


def pretrain_backbone(content_root: Path | str, style_root: Path | str,
                      backbone_config: BackboneConfig, out_dir: Path | str,
                      config: PretrainConfig | None = None,
                      progress: bool = False) -> tuple[Backbone, dict]:
    """Train the autoencoder then the denoiser on a toy corpus, freeze, save.

    Returns the frozen backbone and a metrics dict including the held-out
    reconstruction MAE.
    """
    config = config or PretrainConfig()
    paths = list_images(content_root) + list_images(style_root)
    size = backbone_config.image_size
    images = torch.stack([load_image(p, size=size) for p in paths])

    gen = torch.Generator().manual_seed(config.seed)
    perm = torch.randperm(len(images), generator=gen)
    n_val = max(1, int(len(images) * config.val_fraction))
    val, train = images[perm[:n_val]], images[perm[n_val:]]
    if len(train) == 0:
        raise ConfigurationError("corpus too small for the requested val fraction")

    backbone = Backbone(backbone_config, seed=config.seed, frozen=False)
    ae = backbone.autoencoder

    def batches(steps, count):
        for _ in range(steps):
            idx = torch.randint(0, len(train), (count,), generator=gen)
            yield train[idx].permute(0, 3, 1, 2)

    opt = torch.optim.Adam(ae.parameters(), lr=config.ae_lr)
    iterator = batches(config.ae_steps, config.batch_size)
    if progress:
        iterator = tqdm(iterator, total=config.ae_steps, desc="autoencoder")
    for x in iterator:
        recon = ae.decode(ae.encode(x))
        loss = (recon - x).abs().mean() + 0.5 * ((recon - x) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()

    # Calibrate the latent scale so denoiser inputs are roughly unit variance.
    with torch.no_grad():
        sample = train[:min(len(train), 256)].permute(0, 3, 1, 2)
        raw = ae.encoder(sample * 2.0 - 1.0)
        ae.latent_scale.fill_(1.0 / raw.std().clamp(min=1e-6))
        latents = torch.stack([
            backbone.encode(train[i]) for i in range(len(train))])

    schedule = backbone.schedule
    alpha_bars = schedule.alpha_bars.to(torch.float32)
    opt = torch.optim.Adam(backbone.unet.parameters(), lr=config.denoiser_lr)
    steps = range(config.denoiser_steps)
    if progress:
        steps = tqdm(steps, desc="denoiser")
    for _ in steps:
        idx = torch.randint(0, len(latents), (config.batch_size,), generator=gen)
        z0 = latents[idx]
        tau = torch.randint(0, backbone_config.train_timesteps, (config.batch_size,),
                            generator=gen)
        noise = torch.randn(z0.shape, generator=gen)
        ab = alpha_bars[tau][:, None, None, None]
        z_t = ab.sqrt() * z0 + (1 - ab).sqrt() * noise
        pred = backbone.unet(z_t, tau.float(), step=-1, ctx=None)
        loss = ((pred - noise) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()

    backbone.freeze()
    with torch.no_grad():
        recon = backbone.decode(backbone.encode(val))
        val_mae = float((recon - val).abs().mean())
    backbone.save(out_dir)
    metrics = {"val_mae": val_mae, "corpus_size": len(images),
               "recon_mae_gate": config.recon_mae_gate,
               "gate_passed": val_mae < config.recon_mae_gate}
    (Path(out_dir) / "pretrain_metrics.json").write_text(json.dumps(metrics, indent=2))
    return backbone, metrics


# -- style-transfer training --------------------------------------------------


@dataclass
class TrainConfig:
    content_root: str = ""
    style_root: str = ""
    backbone_checkpoint: str = ""
    checkpoint_dir: str = "checkpoints"
    batch_size: int = 1
    grad_accumulation: int = 8
    lr_hijack: float = 1e-4
    lr_heads: float = 1e-4
    lr_style_encoder: float = 1e-4
    lr_discriminators: float = 2e-4
    max_steps: int = 500
    seed: int = 0
    sampling_steps_override: int | None = 10  # toy-mode unroll for tests
    noise_window: tuple[int, int] | None = None  # None: paper window rescaled
    attn_stop: int | None = None  # None: replace at every step
    identity_unroll_stride: int = 2
    style_code_dim: int = 256
    style_encoder_id: str = "feature-stats"
    style_encoder_trainable: bool = False
    checkpoint_every: int = 0  # 0: only the final checkpoint
    log_path: str | None = None
    negatives_bank_size: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    loss_config: LossConfig = field(default_factory=LossConfig)

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accumulation

    def to_json_dict(self) -> dict:
        data = asdict(self)
        data["weights"] = asdict(self.weights)
        data["loss_config"] = asdict(self.loss_config)
        data["loss_config"]["disabled_terms"] = list(self.loss_config.disabled_terms)
        if self.noise_window is not None:
            data["noise_window"] = list(self.noise_window)
        return data

    @classmethod
    def from_json_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "weights" in data:
            data["weights"] = LossWeights(**data["weights"])
        if "loss_config" in data:
            lc = dict(data["loss_config"])
            lc["disabled_terms"] = tuple(lc.get("disabled_terms", ()))
            data["loss_config"] = LossConfig(**lc)
        if data.get("noise_window") is not None:
            data["noise_window"] = tuple(data["noise_window"])
        return cls(**data)


class GradientAccumulator:
    """Scale per-micro-step losses and step the optimizers once per window."""

    def __init__(self, optimizers: list[torch.optim.Optimizer], every: int):
        if every < 1:
            raise ConfigurationError("grad_accumulation must be >= 1")
        self.optimizers = optimizers
        self.every = every
        self.micro = 0

    def backward(self, loss: torch.Tensor, retain_graph: bool = False) -> None:
        (loss / self.every).backward(retain_graph=retain_graph)

    def step(self) -> bool:
        """Count one micro-step; apply and clear gradients at window edges."""
        self.micro += 1
        if self.micro % self.every:
            return False
        for opt in self.optimizers:
            opt.step()
        for opt in self.optimizers:
            opt.zero_grad(set_to_none=True)
        return True

    @property
    def at_window_boundary(self) -> bool:
        return self.micro % self.every == 0


class StyleTransferTrainer:
    """Unrolled trainer over one frozen backbone."""

    def __init__(self, config: TrainConfig, backbone: Backbone | None = None):
        self.config = config
        self.backbone = backbone or Backbone.load(config.backbone_checkpoint)
        if not self.backbone.frozen:
            self.backbone.freeze()
        self.initial_checksum = self.backbone.parameter_checksum()

        bb_conf = self.backbone.config
        override = config.sampling_steps_override
        if override and override != bb_conf.sampling_steps:
            schedule = DiffusionSchedule.linear(bb_conf.train_timesteps, override)
        else:
            schedule = self.backbone.schedule
        self.sampler = DiffusionSampler(self.backbone, schedule)
        self.identity_sampler = self.sampler.subsampled(config.identity_unroll_stride)

        T = self.sampler.num_steps
        if config.noise_window is not None:
            self.window = InjectionWindow(*config.noise_window).validated(T)
        else:
            self.window = InjectionWindow.paper_default(T)
        stride = config.identity_unroll_stride
        self.identity_window = InjectionWindow(
            -(-self.window.start_step // stride),
            min(-(-self.window.end_step // stride), self.identity_sampler.num_steps),
        ).validated(self.identity_sampler.num_steps)
        if self.window.start_step == 0 and self.window.end_step == T:
            raise ConfigurationError(
                "a full injection window leaves no live steps; nothing would train")

        self.extractor = FeatureExtractor()
        self.registry = default_registry(self.extractor, dim=config.style_code_dim,
                                         trainable=config.style_encoder_trainable)
        self.style_encoder = self.registry.get(config.style_encoder_id)
        self.hijack = build_hijack(self.backbone.enumerate_attention_sites(),
                                   code_dim=self.style_encoder.dim)
        self.decoder_site_order = [s.site_id for s in self.backbone.decoder_sites()]
        head_dim = sum(s.v_dim for s in self.backbone.decoder_sites())
        self.trainables = nn.ModuleDict({
            "hijack": self.hijack,
            "discriminator": DomainDiscriminator(),
            "patch_discriminator": PatchDiscriminator(),
            "style_head": ProjectionHead(head_dim),
            "content_head": ProjectionHead(head_dim),
        })
        if config.style_encoder_trainable:
            self.trainables["style_encoder"] = self.style_encoder
        self.modules = LossModules(
            extractor=self.extractor,
            discriminator=self.trainables["discriminator"],
            patch_discriminator=self.trainables["patch_discriminator"],
            style_head=self.trainables["style_head"],
            content_head=self.trainables["content_head"],
            style_encoder=self.style_encoder,
        )

        gen_groups = [
            {"params": list(self.hijack.parameters()), "lr": config.lr_hijack},
            {"params": list(self.trainables["style_head"].parameters())
             + list(self.trainables["content_head"].parameters()), "lr": config.lr_heads},
        ]
        if config.style_encoder_trainable:
            gen_groups.append({"params": list(self.style_encoder.parameters()),
                               "lr": config.lr_style_encoder})
        self.opt_gen = torch.optim.Adam(gen_groups)
        self.opt_disc = torch.optim.Adam(
            list(self.trainables["discriminator"].parameters())
            + list(self.trainables["patch_discriminator"].parameters()),
            lr=config.lr_discriminators)
        self.accumulator = GradientAccumulator([self.opt_gen, self.opt_disc],
                                               config.grad_accumulation)

        self.rng = torch.Generator().manual_seed(config.seed)
        self.step_counter = 0
        self.negatives_bank: list[AttentionSummary] = []

    # -- pieces ---------------------------------------------------------------

    def _set_discriminators_trainable(self, flag: bool) -> None:
        for name in ("discriminator", "patch_discriminator"):
            for p in self.trainables[name].parameters():
                p.requires_grad_(flag)

    def _stylize_unrolled(self, sampler, window, content_image, style_image,
                          style_code):
        """Invert both images, run the hijacked reverse pass, decode."""
        with torch.no_grad():
            z_content = self.backbone.encode(content_image)
            noise_trace, _ = sampler.invert(z_content)
            z_style = self.backbone.encode(style_image)
            _, style_trace = sampler.invert(z_style, policy=AttentionPolicy.record())
        sink: dict[int, dict[str, torch.Tensor]] = {}
        policy = wire_policy(self.hijack, style_trace, style_code,
                             stop_step=self.config.attn_stop, summary_sink=sink)
        z_out = sampler.reverse(noise_trace.terminal_latent, trace=noise_trace,
                                window=window, policy=policy)
        return self.backbone.decode(z_out), sink

    def train_step(self, content_image: torch.Tensor, style_image: torch.Tensor,
                   content_key: str = "content", style_key: str = "style") -> dict:
        """One unrolled micro-step; applies updates at accumulation boundaries."""
        config = self.config
        color_matched = match_colors(content_image, style_image)
        style_code = self.style_encoder.encode(style_image)
        content_code = self.style_encoder.encode(content_image)

        stylized, sink_sc = self._stylize_unrolled(
            self.sampler, self.window, color_matched, style_image, style_code)
        style_identity, sink_ss = self._stylize_unrolled(
            self.identity_sampler, self.identity_window, style_image, style_image,
            style_code)
        content_identity, sink_cc = self._stylize_unrolled(
            self.identity_sampler, self.identity_window, content_image, content_image,
            content_code)

        summaries = []
        for sink, s_key, c_key in ((sink_sc, style_key, content_key),
                                   (sink_ss, style_key, style_key),
                                   (sink_cc, content_key, content_key)):
            if sink:
                summaries.append(AttentionSummary(
                    s_key, c_key, pooled_attention_vector(sink, self.decoder_site_order)))

        crop_seed = int(torch.randint(0, 2 ** 31 - 1, (), generator=self.rng))
        batch = StylizationBatch(
            content=color_matched, style=style_image, stylized=stylized,
            style_identity=style_identity, content_identity=content_identity,
            attention_summaries=summaries,
            extra_negatives=list(self.negatives_bank),
            crop_seed=crop_seed)

        self._set_discriminators_trainable(False)
        total, breakdown = total_loss(batch, self.modules, config.weights,
                                      config.loss_config)
        self.accumulator.backward(total)
        self._set_discriminators_trainable(True)

        _, disc_obj = adversarial_losses(style_image, stylized.detach(),
                                         self.modules.discriminator, config.weights)
        patch_obj = patch_discriminator_loss(stylized, style_image,
                                             self.modules.patch_discriminator,
                                             config.loss_config, seed=crop_seed)
        self.accumulator.backward(-disc_obj + patch_obj)

        for summary in summaries:
            self.negatives_bank.append(AttentionSummary(
                summary.style_key, summary.content_key, summary.vector.detach().clone()))
        self.negatives_bank = self.negatives_bank[-config.negatives_bank_size:]

        self.step_counter += 1
        self.accumulator.step()
        record = dict(breakdown)
        record["total"] = float(total.detach())
        record["disc_domain"] = float(disc_obj.detach())
        record["disc_patch"] = float(patch_obj.detach())
        return record

    # -- loop -----------------------------------------------------------------

    def train(self, progress: bool = False) -> Path:
        """Run ``max_steps`` micro-steps over the configured corpora."""
        config = self.config
        content_paths = list_images(config.content_root)
        style_paths = list_images(config.style_root)
        size = self.backbone.config.image_size
        log_path = Path(config.log_path or Path(config.checkpoint_dir) / "loss_log.jsonl")
        log_path.parent.mkdir(parents=True, exist_ok=True)

        steps = range(self.step_counter, config.max_steps)
        if progress:
            steps = tqdm(steps, desc="train")
        with log_path.open("a") as log:
            for _ in steps:
                records = []
                for _ in range(config.batch_size):
                    ci = int(torch.randint(0, len(content_paths), (), generator=self.rng))
                    si = int(torch.randint(0, len(style_paths), (), generator=self.rng))
                    record = self.train_step(
                        load_image(content_paths[ci], size=size),
                        load_image(style_paths[si], size=size),
                        content_key=content_paths[ci].stem,
                        style_key=style_paths[si].stem)
                    records.append(record)
                step = self.step_counter
                for term, value in records[-1].items():
                    log.write(json.dumps({"step": step, "term": term, "value": value}) + "\n")
                if config.checkpoint_every and step % config.checkpoint_every == 0 \
                        and self.accumulator.at_window_boundary:
                    self.save_checkpoint(Path(config.checkpoint_dir) / f"step_{step:06d}")
        final = Path(config.checkpoint_dir) / "final"
        self.save_checkpoint(final)
        return final

    def backbone_checksum_unchanged(self) -> bool:
        return self.backbone.parameter_checksum() == self.initial_checksum

    # -- persistence ----------------------------------------------------------

    def _optimizer_state_tensors(self) -> dict[str, torch.Tensor]:
        named = {id(p): name for name, p in self.trainables.named_parameters()}
        tensors = {}
        for opt_name, opt in (("opt_gen", self.opt_gen), ("opt_disc", self.opt_disc)):
            for param, state in opt.state.items():
                pname = named[id(param)]
                for key, value in state.items():
                    tensor = value if torch.is_tensor(value) else torch.tensor(float(value))
                    tensors[f"{opt_name}/{pname}/{key}"] = tensor
        return tensors

    def save_checkpoint(self, directory: Path | str) -> None:
        directory = Path(directory)
        tensors = {f"modules/{k}": v for k, v in self.trainables.state_dict().items()}
        tensors.update(self._optimizer_state_tensors())
        for i, summary in enumerate(self.negatives_bank):
            tensors[f"bank/{i}/vector"] = summary.vector
        index = tensorio.save_named_tensors(directory, tensors)
        tensorio.save_bytes(directory / "rng_state.bin",
                            self.rng.get_state().numpy().tobytes())
        tensorio.write_manifest(directory, {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "train_checkpoint",
            "step_counter": self.step_counter,
            "micro_counter": self.accumulator.micro,
            "backbone_fingerprint": self.backbone.fingerprint(),
            "config": self.config.to_json_dict(),
            "bank_keys": [[s.style_key, s.content_key] for s in self.negatives_bank],
            "tensors": index,
        })

    @classmethod
    def load_checkpoint(cls, directory: Path | str,
                        backbone: Backbone | None = None) -> "StyleTransferTrainer":
        directory = Path(directory)
        manifest = tensorio.read_manifest(directory)
        if manifest.get("kind") != "train_checkpoint":
            raise ConfigurationError(f"{directory} is not a training checkpoint")
        config = TrainConfig.from_json_dict(manifest["config"])
        trainer = cls(config, backbone=backbone)
        if trainer.backbone.fingerprint() != manifest["backbone_fingerprint"]:
            raise TraceCompatibilityError(
                "checkpoint was trained against a different backbone")
        tensors = tensorio.load_named_tensors(directory, manifest["tensors"])

        module_state = {k.split("/", 1)[1]: v for k, v in tensors.items()
                        if k.startswith("modules/")}
        trainer.trainables.load_state_dict(module_state)

        named = dict(trainer.trainables.named_parameters())
        for opt_name, opt in (("opt_gen", trainer.opt_gen), ("opt_disc", trainer.opt_disc)):
            prefix = f"{opt_name}/"
            grouped: dict[str, dict[str, torch.Tensor]] = {}
            for key, value in tensors.items():
                if not key.startswith(prefix):
                    continue
                pname, state_key = key[len(prefix):].rsplit("/", 1)
                grouped.setdefault(pname, {})[state_key] = value
            for pname, state in grouped.items():
                opt.state[named[pname]] = state

        bank = []
        for i, (s_key, c_key) in enumerate(manifest.get("bank_keys", [])):
            bank.append(AttentionSummary(s_key, c_key, tensors[f"bank/{i}/vector"]))
        trainer.negatives_bank = bank

        rng_bytes = (directory / "rng_state.bin").read_bytes()
        state = torch.frombuffer(bytearray(rng_bytes), dtype=torch.uint8).clone()
        trainer.rng.set_state(state)
        trainer.step_counter = manifest["step_counter"]
        trainer.accumulator.micro = manifest.get("micro_counter", 0)
        return trainer
