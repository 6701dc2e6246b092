"""The full training objective: style, adversarial, perceptual, identity,
style-code, contrastive, and Sobel-guided patch terms.

Norm convention: every ||.||_2 below is an unnormalised flattened L2 norm
(a single wrong pixel of magnitude d contributes exactly d). Means and
standard deviations of feature maps are per-channel population statistics.
"""

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from . import imageops
from .errors import BatchConstructionError, EncoderMixingError, NonFiniteLossError

FEATURE_EXTRACTOR_SEED = 1234


@dataclass
class LossWeights:
    """Loss-term weights; defaults are the published operating point."""

    vgg: float = 0.5
    adv: float = 5.0
    percep: float = 6.0
    identity: float = 100.0
    aladin: float = 10.0
    contra: float = 1.0
    patch: float = 10.0
    p_simple: float = 0.25
    p_complex: float = 0.75
    temperature: float = 0.1

    def __post_init__(self):
        for name in ("vgg", "adv", "percep", "identity", "aladin", "contra",
                     "patch", "p_simple", "p_complex", "temperature"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class LossConfig:
    crop_size: int = 16
    crops_per_bin: int = 4
    candidate_crops: int = 64
    disabled_terms: tuple[str, ...] = ()


TERM_NAMES = ("style", "adv", "percep", "identity_style", "identity_content",
              "aladin", "contra_style", "contra_content", "patch_simple",
              "patch_complex")


class FeatureExtractor(nn.Module):
    """Frozen conv pyramid used as the shared style/perceptual feature space.

    Weights are random but fixed by seed; convolutions use circular padding
    so pooled channel statistics are exactly invariant to stride-aligned
    circular translations. ``perceptual_index`` plays the conv4_2 role.
    """

    def __init__(self, channels: tuple[int, ...] = (24, 48, 96, 192),
                 perceptual_index: int = 2, seed: int = FEATURE_EXTRACTOR_SEED):
        super().__init__()
        self.perceptual_index = perceptual_index
        self.channels = tuple(channels)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            stages = []
            in_ch = 3
            for out_ch in channels:
                stages.append(nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1,
                                        padding_mode="circular"))
                in_ch = out_ch
            self.stages = nn.ModuleList(stages)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def num_layers(self) -> int:
        return len(self.stages)

    def features(self, image: torch.Tensor) -> list[torch.Tensor]:
        """[H, W, 3] image -> list of [C_i, H_i, W_i] feature maps."""
        h = image.permute(2, 0, 1)[None]
        out = []
        for stage in self.stages:
            h = F.leaky_relu(stage(h), 0.2)
            out.append(h[0])
        return out

    def perceptual(self, image: torch.Tensor) -> torch.Tensor:
        return self.features(image)[self.perceptual_index]


def feature_mean_std(feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel population mean and std of one [C, H, W] feature map."""
    flat = feat.reshape(feat.shape[0], -1)
    mean = flat.mean(dim=1)
    std = flat.var(dim=1, unbiased=False).clamp(min=0).add(1e-12).sqrt()
    return mean, std


# -- discriminators and heads -------------------------------------------------


class DomainDiscriminator(nn.Module):
    """Image-level real-artwork vs stylized classifier (returns logits)."""

    def __init__(self, widths: tuple[int, ...] = (32, 64, 128)):
        super().__init__()
        layers = []
        in_ch = 3
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            in_ch = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: [H, W, 3] or [B, H, W, 3] -> logits [B]."""
        batched = images.dim() == 4
        x = images if batched else images[None]
        h = self.body(x.permute(0, 3, 1, 2))
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return self.head(h).squeeze(-1)


class PatchDiscriminator(nn.Module):
    """Projection discriminator over Sobel-conditioned crops.

    A candidate crop (RGB + its Sobel map, 4 channels) is scored against the
    mean embedding of a set of context crops, so "real" means "looks like the
    style crops it is shown next to".
    """

    def __init__(self, widths: tuple[int, ...] = (32, 64, 128), embed_dim: int = 64):
        super().__init__()
        layers = []
        in_ch = 4
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            in_ch = w
        self.body = nn.Sequential(*layers)
        self.embed = nn.Linear(in_ch, embed_dim)
        self.score = nn.Linear(embed_dim, 1)
        self.project = nn.Linear(embed_dim, embed_dim, bias=False)

    def _embed(self, stacks: torch.Tensor) -> torch.Tensor:
        h = self.body(stacks)
        return self.embed(F.adaptive_avg_pool2d(h, 1).flatten(1))

    def forward(self, candidates: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """candidates: [B, 4, s, s], context: [M, 4, s, s] -> logits [B]."""
        cand = self._embed(candidates)
        ctx = self._embed(context).mean(dim=0, keepdim=True)
        return (self.score(cand) + cand @ self.project(ctx).T).squeeze(-1)


class ProjectionHead(nn.Module):
    """Two-layer head mapping pooled attention vectors to the unit sphere."""

    def __init__(self, in_dim: int, hidden: int = 256, out_dim: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.SiLU(),
                                 nn.Linear(hidden, out_dim))

    def forward(self, vectors: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(vectors), dim=-1)


@dataclass
class AttentionSummary:
    """Per-timestep-averaged attention vector of one stylization run."""

    style_key: str
    content_key: str
    vector: torch.Tensor


@dataclass
class StylizationBatch:
    """Inputs of one unrolled training example.

    ``content`` is the color-matched content image; the identity
    reconstructions re-style each source with itself. Attention summaries
    carry the pooled hijacked V vectors used by the contrastive heads and
    must cover at least two distinct styles and contents when contrastive
    terms are enabled.
    """

    content: torch.Tensor
    style: torch.Tensor
    stylized: torch.Tensor
    style_identity: torch.Tensor
    content_identity: torch.Tensor
    attention_summaries: list[AttentionSummary] = field(default_factory=list)
    extra_negatives: list[AttentionSummary] = field(default_factory=list)
    crop_seed: int = 0

    def __post_init__(self):
        shape = self.content.shape
        for name in ("style", "stylized", "style_identity", "content_identity"):
            if getattr(self, name).shape != shape:
                raise BatchConstructionError(
                    f"{name} shape {tuple(getattr(self, name).shape)} != {tuple(shape)}")


# -- individual terms ---------------------------------------------------------


def style_loss(stylized: torch.Tensor, style: torch.Tensor,
               extractor: FeatureExtractor, weights: LossWeights) -> torch.Tensor:
    """Sum over layers of L2 gaps between per-channel feature means and stds."""
    total = stylized.new_zeros(())
    for f_sc, f_s in zip(extractor.features(stylized), extractor.features(style)):
        mu_sc, sd_sc = feature_mean_std(f_sc)
        mu_s, sd_s = feature_mean_std(f_s)
        total = total + torch.linalg.vector_norm(mu_sc - mu_s) \
            + torch.linalg.vector_norm(sd_sc - sd_s)
    return weights.vgg * total


def adversarial_losses(style: torch.Tensor, stylized: torch.Tensor,
                       discriminator: DomainDiscriminator,
                       weights: LossWeights) -> tuple[torch.Tensor, torch.Tensor]:
    """(generator term, discriminator objective).

    The generator term is the weighted non-saturating loss
    ``-adv * E[log D(stylized)]``. The discriminator objective is the raw
    ``E[log D(style)] + E[log(1 - D(stylized))]`` (stylized detached), which
    the trainer maximises.
    """
    logit_fake_live = discriminator(stylized)
    gen = weights.adv * (-F.logsigmoid(logit_fake_live).mean())
    logit_real = discriminator(style)
    logit_fake = discriminator(stylized.detach())
    disc = F.logsigmoid(logit_real).mean() + F.logsigmoid(-logit_fake).mean()
    return gen, disc


def perceptual_loss(stylized: torch.Tensor, content: torch.Tensor,
                    extractor: FeatureExtractor, weights: LossWeights) -> torch.Tensor:
    gap = extractor.perceptual(stylized) - extractor.perceptual(content)
    return weights.percep * torch.linalg.vector_norm(gap.reshape(-1))


def identity_losses(style_identity: torch.Tensor, style: torch.Tensor,
                    content_identity: torch.Tensor, content: torch.Tensor,
                    weights: LossWeights) -> torch.Tensor:
    return identity_style_term(style_identity, style, weights) \
        + identity_content_term(content_identity, content, weights)


def identity_style_term(style_identity, style, weights: LossWeights) -> torch.Tensor:
    return weights.identity * torch.linalg.vector_norm((style_identity - style).reshape(-1))


def identity_content_term(content_identity, content, weights: LossWeights) -> torch.Tensor:
    return weights.identity * torch.linalg.vector_norm((content_identity - content).reshape(-1))


def aladin_loss(stylized: torch.Tensor, style: torch.Tensor, encoder,
                weights: LossWeights) -> torch.Tensor:
    """L2 gap between the global style codes of stylized and style images."""
    code_sc = encoder.encode(stylized)
    code_s = encoder.encode(style)
    return aladin_loss_from_codes(code_sc, code_s, weights)


def aladin_loss_from_codes(code_sc, code_s, weights: LossWeights) -> torch.Tensor:
    if code_sc.encoder_id != code_s.encoder_id:
        raise EncoderMixingError(
            f"cannot mix codes from {code_sc.encoder_id!r} and {code_s.encoder_id!r}")
    return weights.aladin * torch.linalg.vector_norm(code_sc.values - code_s.values)


def _info_nce(anchor: torch.Tensor, positive: torch.Tensor,
              negatives: list[torch.Tensor], tau: float) -> torch.Tensor:
    pos = torch.exp(anchor @ positive / tau)
    denom = pos
    for neg in negatives:
        denom = denom + torch.exp(anchor @ neg / tau)
    return -torch.log(pos / denom)


def contrastive_terms(batch: StylizationBatch, style_head: ProjectionHead,
                      content_head: ProjectionHead,
                      weights: LossWeights) -> tuple[torch.Tensor, torch.Tensor]:
    """InfoNCE style/content terms over pooled attention vectors.

    Style positives share a style across different contents; content
    positives share a content across different styles; negatives are pool
    entries with a different style (resp. content) than the anchor.
    """
    summaries = list(batch.attention_summaries)
    pool = summaries + list(batch.extra_negatives)
    if len({s.style_key for s in pool}) < 2 or len({s.content_key for s in pool}) < 2:
        raise BatchConstructionError(
            "contrastive terms need >= 2 distinct styles and contents in the batch")

    style_embs = [style_head(s.vector) for s in pool]
    content_embs = [content_head(s.vector) for s in pool]
    n_anchor = len(summaries)

    style_losses, content_losses = [], []
    for i in range(n_anchor):
        anchor = summaries[i]
        s_negs = [style_embs[j] for j in range(len(pool))
                  if pool[j].style_key != anchor.style_key]
        for j in range(len(pool)):
            if j == i or pool[j].style_key != anchor.style_key \
                    or pool[j].content_key == anchor.content_key:
                continue
            style_losses.append(_info_nce(style_embs[i], style_embs[j], s_negs,
                                          weights.temperature))
        c_negs = [content_embs[j] for j in range(len(pool))
                  if pool[j].content_key != anchor.content_key]
        for j in range(len(pool)):
            if j == i or pool[j].content_key != anchor.content_key \
                    or pool[j].style_key == anchor.style_key:
                continue
            content_losses.append(_info_nce(content_embs[i], content_embs[j], c_negs,
                                            weights.temperature))
    if not style_losses or not content_losses:
        raise BatchConstructionError(
            "batch lacks the (s_i c_j)/(s_i c_x)/(s_y c_j) pairings for contrastive terms")
    style_term = weights.contra * torch.stack(style_losses).mean()
    content_term = weights.contra * torch.stack(content_losses).mean()
    return style_term, content_term


def contrastive_losses(batch: StylizationBatch, style_head: ProjectionHead,
                       content_head: ProjectionHead, weights: LossWeights) -> torch.Tensor:
    s_term, c_term = contrastive_terms(batch, style_head, content_head, weights)
    return s_term + c_term


def _stacked_crops(image: torch.Tensor, sobel: torch.Tensor, n: int, size: int,
                   bin: str, seed: int, candidates: int) -> torch.Tensor:
    crops, picks = imageops.sample_crops(image, sobel, n, size, bin, seed,
                                         candidates, return_positions=True)
    stacks = []
    for crop, pick in zip(crops, picks):
        sm = sobel[pick.top:pick.top + size, pick.left:pick.left + size]
        stacks.append(torch.cat([crop.permute(2, 0, 1), sm[None]], dim=0))
    return torch.stack(stacks)


def patch_terms(stylized: torch.Tensor, style: torch.Tensor,
                patch_disc: PatchDiscriminator, weights: LossWeights,
                config: LossConfig, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Generator-side Sobel-guided patch terms for the simple/complex bins."""
    sm_sc = imageops.sobel_map(stylized)
    sm_s = imageops.sobel_map(style)
    terms = []
    for offset, bin in enumerate(("simple", "complex")):
        fake = _stacked_crops(stylized, sm_sc, config.crops_per_bin, config.crop_size,
                              bin, seed + offset, config.candidate_crops)
        ctx = _stacked_crops(style, sm_s, config.crops_per_bin, config.crop_size,
                             bin, seed + offset + 100, config.candidate_crops)
        logits = patch_disc(fake, ctx)
        terms.append(-F.logsigmoid(logits).mean())
    simple = weights.patch * weights.p_simple * terms[0]
    complex_ = weights.patch * weights.p_complex * terms[1]
    return simple, complex_


def patch_losses(stylized: torch.Tensor, style: torch.Tensor,
                 patch_disc: PatchDiscriminator, weights: LossWeights,
                 config: LossConfig | None = None, seed: int = 0) -> torch.Tensor:
    config = config or LossConfig()
    simple, complex_ = patch_terms(stylized, style, patch_disc, weights, config, seed)
    return simple + complex_


def patch_discriminator_loss(stylized: torch.Tensor, style: torch.Tensor,
                             patch_disc: PatchDiscriminator, config: LossConfig,
                             seed: int = 0) -> torch.Tensor:
    """BCE objective for the patch discriminator (stylized detached)."""
    sm_sc = imageops.sobel_map(stylized.detach())
    sm_s = imageops.sobel_map(style)
    loss = stylized.new_zeros(())
    for offset, bin in enumerate(("simple", "complex")):
        fake = _stacked_crops(stylized.detach(), sm_sc, config.crops_per_bin,
                              config.crop_size, bin, seed + offset, config.candidate_crops)
        real = _stacked_crops(style, sm_s, config.crops_per_bin, config.crop_size,
                              bin, seed + offset + 100, config.candidate_crops)
        ctx = _stacked_crops(style, sm_s, config.crops_per_bin, config.crop_size,
                             bin, seed + offset + 200, config.candidate_crops)
        loss = loss - F.logsigmoid(patch_disc(real, ctx)).mean() \
            - F.logsigmoid(-patch_disc(fake, ctx)).mean()
    return loss / 2.0


@dataclass
class LossModules:
    """Trainable and frozen modules consumed by ``total_loss``."""

    extractor: FeatureExtractor
    discriminator: DomainDiscriminator
    patch_discriminator: PatchDiscriminator
    style_head: ProjectionHead
    content_head: ProjectionHead
    style_encoder: object  # StyleEncoder


def total_loss(batch: StylizationBatch, modules: LossModules, weights: LossWeights,
               config: LossConfig | None = None
               ) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of every enabled term plus a per-term breakdown.

    Breakdown values are the weighted contributions, so their sum equals the
    returned total. Any non-finite term aborts with the term named.
    """
    config = config or LossConfig()
    terms: dict[str, torch.Tensor] = {}

    if "style" not in config.disabled_terms:
        terms["style"] = style_loss(batch.stylized, batch.style, modules.extractor, weights)
    if "adv" not in config.disabled_terms:
        gen, _ = adversarial_losses(batch.style, batch.stylized,
                                    modules.discriminator, weights)
        terms["adv"] = gen
    if "percep" not in config.disabled_terms:
        terms["percep"] = perceptual_loss(batch.stylized, batch.content,
                                          modules.extractor, weights)
    if "identity_style" not in config.disabled_terms:
        terms["identity_style"] = identity_style_term(batch.style_identity, batch.style,
                                                      weights)
    if "identity_content" not in config.disabled_terms:
        terms["identity_content"] = identity_content_term(batch.content_identity,
                                                          batch.content, weights)
    if "aladin" not in config.disabled_terms:
        terms["aladin"] = aladin_loss(batch.stylized, batch.style,
                                      modules.style_encoder, weights)
    contra_enabled = ("contra_style" not in config.disabled_terms
                      or "contra_content" not in config.disabled_terms)
    if contra_enabled and batch.attention_summaries:
        s_term, c_term = contrastive_terms(batch, modules.style_head,
                                           modules.content_head, weights)
        if "contra_style" not in config.disabled_terms:
            terms["contra_style"] = s_term
        if "contra_content" not in config.disabled_terms:
            terms["contra_content"] = c_term
    patch_enabled = ("patch_simple" not in config.disabled_terms
                     or "patch_complex" not in config.disabled_terms)
    if patch_enabled:
        simple, complex_ = patch_terms(batch.stylized, batch.style,
                                       modules.patch_discriminator, weights, config,
                                       seed=batch.crop_seed)
        if "patch_simple" not in config.disabled_terms:
            terms["patch_simple"] = simple
        if "patch_complex" not in config.disabled_terms:
            terms["patch_complex"] = complex_

    breakdown = {}
    total = None
    for name, value in terms.items():
        scalar = float(value.detach())
        if not torch.isfinite(value):
            raise NonFiniteLossError(name, scalar)
        breakdown[name] = scalar
        total = value if total is None else total + value
    if total is None:
        total = batch.stylized.new_zeros(())
    return total, breakdown
