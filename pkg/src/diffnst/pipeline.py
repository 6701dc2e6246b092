"""End-to-end stylization, inference-time controls, and attention analysis.

Every operation is deterministic given a checkpoint and a seed; requests are
independent and can safely share one loaded pipeline.
"""

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np
import torch

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .backbone import Backbone
from .diffusion import (AttentionPolicy, AttentionTrace, DiffusionSampler,
                        InjectionWindow, NoiseTrace)
from .errors import ConfigurationError, TraceCompatibilityError
from .hijack import HijackSet, wire_policy
from .imageops import load_image, match_colors, resize_image, save_image
from .style_embed import StyleEncoder

MATRIX_FILE = "heatmap.json"


@dataclass
class StylizeRequest:
    """One stylization job; window and stop values are in sampling steps."""

    content: str
    style: str
    noise_start: int | None = None  # None: paper operating point for T
    noise_end: int | None = None
    attn_stop: int | None = None  # None: replace at every step
    color_match: bool = True
    seed: int = 0
    output: str | None = None

    def resolved_window(self, num_steps: int) -> InjectionWindow:
        default = InjectionWindow.paper_default(num_steps)
        start = default.start_step if self.noise_start is None else self.noise_start
        end = default.end_step if self.noise_end is None else self.noise_end
        return InjectionWindow(start, end).validated(num_steps)

    def resolved_attn_stop(self, num_steps: int) -> int:
        stop = num_steps if self.attn_stop is None else self.attn_stop
        if not 0 <= stop <= num_steps:
            raise ConfigurationError(f"attn_stop {stop} outside [0, {num_steps}]")
        return stop

    def pair_name(self) -> str:
        return f"{Path(self.content).stem}__{Path(self.style).stem}"

    def to_json_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["content"] = str(Path(self.content).resolve())
        data["style"] = str(Path(self.style).resolve())
        return data


class StylizationPipeline:
    """Frozen backbone + trained hijack + style encoder, ready for requests."""

    def __init__(self, backbone: Backbone, hijack: HijackSet,
                 style_encoder: StyleEncoder, sampler: DiffusionSampler | None = None):
        self.backbone = backbone
        self.hijack = hijack
        self.style_encoder = style_encoder
        self.sampler = sampler or DiffusionSampler(backbone)

    @classmethod
    def from_checkpoint(cls, checkpoint_dir: Path | str,
                        backbone: Backbone | None = None) -> "StylizationPipeline":
        from .trainer import StyleTransferTrainer
        trainer = StyleTransferTrainer.load_checkpoint(checkpoint_dir, backbone=backbone)
        return cls(trainer.backbone, trainer.hijack, trainer.style_encoder,
                   sampler=trainer.sampler)

    @property
    def num_steps(self) -> int:
        return self.sampler.num_steps

    # -- core chain -----------------------------------------------------------

    def _load_pair(self, request: StylizeRequest) -> tuple[torch.Tensor, torch.Tensor]:
        size = self.backbone.config.image_size
        content = load_image(request.content, size=size)
        style = resize_image(load_image(request.style), size)
        return content, style

    def _prepared_content(self, request: StylizeRequest, content, style) -> torch.Tensor:
        return match_colors(content, style) if request.color_match else content

    def _invert_pair(self, prepared_content: torch.Tensor, style: torch.Tensor):
        z_c = self.backbone.encode(prepared_content)
        noise_trace, _ = self.sampler.invert(z_c)
        z_s = self.backbone.encode(style)
        _, style_trace = self.sampler.invert(z_s, policy=AttentionPolicy.record())
        return noise_trace, style_trace

    def stylize(self, request: StylizeRequest) -> torch.Tensor:
        """Full chain: color match, invert both images, hijacked reverse, decode."""
        window = request.resolved_window(self.num_steps)
        attn_stop = request.resolved_attn_stop(self.num_steps)
        content, style = self._load_pair(request)
        prepared = self._prepared_content(request, content, style)
        with torch.no_grad():
            noise_trace, style_trace = self._invert_pair(prepared, style)
            code = self.style_encoder.encode(style)
            policy = wire_policy(self.hijack, style_trace, code, stop_step=attn_stop)
            z_out = self.sampler.reverse(noise_trace.terminal_latent, trace=noise_trace,
                                         window=window, policy=policy)
            image = self.backbone.decode(z_out)
        if request.output:
            self._write_result(request, image)
        return image

    def reconstruct(self, request: StylizeRequest) -> torch.Tensor:
        """Content reconstruction under the same window, with no attention edits."""
        window = request.resolved_window(self.num_steps)
        content, style = self._load_pair(request)
        prepared = self._prepared_content(request, content, style)
        with torch.no_grad():
            z_c = self.backbone.encode(prepared)
            noise_trace, _ = self.sampler.invert(z_c)
            z_out = self.sampler.reverse(noise_trace.terminal_latent, trace=noise_trace,
                                         window=window)
            return self.backbone.decode(z_out)

    def _write_result(self, request: StylizeRequest, image: torch.Tensor,
                      subdir: str | None = None) -> Path:
        out_root = Path(request.output)
        pair_dir = out_root / request.pair_name()
        if subdir:
            pair_dir = pair_dir / subdir
        save_image(image, pair_dir / "stylized.png")
        (pair_dir / "meta.json").write_text(json.dumps(request.to_json_dict(), indent=2))
        return pair_dir

    # -- sweeps ---------------------------------------------------------------

    def sweep(self, request: StylizeRequest, axis: str,
              values: list[int]) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """One stylization per axis value plus a row-composited grid image."""
        if axis not in ("noise_start", "attn_stop"):
            raise ConfigurationError(f"unknown sweep axis {axis!r}")
        if sorted(values) != list(values):
            raise ConfigurationError("sweep values must be sorted ascending")
        T = self.num_steps
        for v in values:
            if axis == "noise_start":
                end = request.resolved_window(T).end_step
                if not 0 <= v < end:
                    raise ConfigurationError(
                        f"noise_start value {v} outside [0, {end})")
            elif not 0 <= v <= T:
                raise ConfigurationError(f"attn_stop value {v} outside [0, {T}]")
        images = []
        for v in values:
            sub = dataclasses.replace(request, **{axis: v}, output=None)
            image = self.stylize(sub)
            images.append(image)
            if request.output:
                self._write_result(dataclasses.replace(request, **{axis: v}),
                                   image, subdir=f"sweep_{axis}/{axis}_{v:03d}")
        grid = torch.cat(images, dim=1)
        if request.output:
            save_image(grid, Path(request.output) / request.pair_name()
                       / f"sweep_{axis}.png")
        return grid, images

    # -- attention analysis ---------------------------------------------------

    def capture_traces(self, request: StylizeRequest
                       ) -> tuple[NoiseTrace, AttentionTrace, AttentionTrace]:
        """Record aligned V traces of the reconstruction and stylized runs.

        Both runs replay the same content noises from the same terminal
        latent, so they differ only through the decoder-site V replacement.
        """
        window = request.resolved_window(self.num_steps)
        attn_stop = request.resolved_attn_stop(self.num_steps)
        content, style = self._load_pair(request)
        prepared = self._prepared_content(request, content, style)
        with torch.no_grad():
            noise_trace, style_trace = self._invert_pair(prepared, style)
            code = self.style_encoder.encode(style)

            recon_policy = AttentionPolicy.record()
            self.sampler.reverse(noise_trace.terminal_latent, trace=noise_trace,
                                 window=window, policy=recon_policy)
            recon_trace = recon_policy.last_recorded_trace

            hijack_policy = wire_policy(self.hijack, style_trace, code,
                                        stop_step=attn_stop)
            effective: dict[tuple[str, int], torch.Tensor] = {}
            base_fn = hijack_policy.replace_fn

            def capture_fn(site_id, step, v):
                out = base_fn(site_id, step, v)
                effective[(site_id, step)] = out.detach().squeeze(0).clone()
                return out

            capture_policy = AttentionPolicy.replace(capture_fn, stop_step=attn_stop)
            self.sampler.reverse(noise_trace.terminal_latent, trace=noise_trace,
                                 window=window, policy=capture_policy)
            stylized_trace = AttentionTrace(
                entries=effective, source_fingerprint=self.sampler.fingerprint,
                resolution=self.backbone.config.latent_size, num_steps=self.num_steps)
        return noise_trace, recon_trace, stylized_trace

    def v_interpolate(self, noise_trace: NoiseTrace, window: InjectionWindow,
                      trace_a: AttentionTrace, trace_b: AttentionTrace,
                      alpha: float) -> torch.Tensor:
        """Reverse pass with V := (1 - alpha) * V_a + alpha * V_b at decoder sites.

        Replacement fires exactly at the (site, step) keys of ``trace_b`` (the
        run being interpolated toward), so alpha = 0 and alpha = 1 reproduce
        the two source runs bit-identically. ``alpha`` outside [0, 1] is the
        over-drive regime.
        """
        keys = set(trace_b.entries)
        for key in keys:
            if key not in trace_a.entries:
                raise TraceCompatibilityError(f"trace_a lacks entry {key}")
            if trace_a.entries[key].shape != trace_b.entries[key].shape:
                raise TraceCompatibilityError(f"shape mismatch at {key}")

        def interp_fn(site_id, step, v):
            key = (site_id, step)
            if key not in keys:
                return v
            if alpha == 0.0:
                chosen = trace_a.entries[key]
            elif alpha == 1.0:
                chosen = trace_b.entries[key]
            else:
                chosen = (1.0 - alpha) * trace_a.entries[key] + alpha * trace_b.entries[key]
            return chosen.unsqueeze(0) if v.dim() == 3 else chosen

        policy = AttentionPolicy.replace(interp_fn)
        with torch.no_grad():
            z_out = self.sampler.reverse(noise_trace.terminal_latent, trace=noise_trace,
                                         window=window, policy=policy)
            return self.backbone.decode(z_out)

    def interpolate_pair(self, request: StylizeRequest,
                         alphas: list[float]) -> list[torch.Tensor]:
        """Stylization-strength interpolation between reconstruction and full hijack."""
        window = request.resolved_window(self.num_steps)
        noise_trace, recon_trace, stylized_trace = self.capture_traces(request)
        images = []
        for alpha in alphas:
            image = self.v_interpolate(noise_trace, window, recon_trace,
                                       stylized_trace, alpha)
            images.append(image)
            if request.output:
                self._write_result(request, image,
                                   subdir=f"interp/alpha_{alpha:+.3f}")
        return images


def attention_diff_heatmap(trace_a: AttentionTrace, trace_b: AttentionTrace,
                           site_order: list[str] | None = None,
                           out_png: Path | str | None = None) -> np.ndarray:
    """Mean |V_a - V_b| per (site, step), normalized to [0, 1] over the matrix."""
    if set(trace_a.entries) != set(trace_b.entries):
        raise TraceCompatibilityError("traces cover different (site, step) grids")
    if trace_a.num_steps != trace_b.num_steps:
        raise TraceCompatibilityError("traces have different step counts")
    sites = sorted({site for site, _ in trace_a.entries})
    if site_order is not None:
        ordered = [s for s in site_order if s in set(sites)]
        if set(ordered) != set(sites):
            raise TraceCompatibilityError("site_order does not cover the traces' sites")
        sites = ordered
    steps = sorted({step for _, step in trace_a.entries})
    matrix = np.zeros((len(sites), len(steps)))
    for i, site in enumerate(sites):
        for j, step in enumerate(steps):
            a = trace_a.entries[(site, step)]
            b = trace_b.entries[(site, step)]
            matrix[i, j] = float((a - b).abs().mean())
    peak = matrix.max()
    if peak > 0:
        matrix = matrix / peak
    if out_png is not None:
        fig, ax = plt.subplots(figsize=(1.2 + 0.35 * len(steps), 1.0 + 0.4 * len(sites)))
        im = ax.imshow(matrix, aspect="auto", cmap="coolwarm", vmin=0.0, vmax=1.0)
        ax.set_xlabel("sampling step")
        ax.set_xticks(range(len(steps)), [str(s) for s in steps])
        ax.set_yticks(range(len(sites)), sites)
        fig.colorbar(im, ax=ax, label="normalized mean |dV|")
        fig.tight_layout()
        Path(out_png).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_png, dpi=120)
        plt.close(fig)
    return matrix
