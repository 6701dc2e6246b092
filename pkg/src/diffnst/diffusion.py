"""Deterministic DDIM-style inversion and reverse sampling with trace plumbing.

Sampling steps are indexed in reverse-process order: step ``0`` operates at
the noisiest train timestep, step ``T - 1`` at the cleanest. Inversion visits
the same transitions in the opposite order and records noises and attention
values under the same step keys, so a trace replayed during ``reverse`` lands
on exactly the transition that produced it.

Both directions use the eta = 0 update, which makes the transition pair an
exact algebraic inverse whenever the same noise tensor is used on both sides.
Traces are immutable after creation; samplers never write into one they read.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from . import tensorio
from .backbone import AttentionHook, Backbone, DiffusionSchedule
from .errors import ConfigurationError, TraceCompatibilityError

TRACE_FORMAT_VERSION = 1


def _trace_fingerprint(backbone: Backbone, schedule: DiffusionSchedule) -> str:
    return f"{backbone.fingerprint()}:{schedule.grid_key()}"


@dataclass
class NoiseTrace:
    """Per-step noise predictions recorded while inverting one latent."""

    noises: list[torch.Tensor]  # indexed by reverse sampling step
    origin_latent: torch.Tensor
    terminal_latent: torch.Tensor
    config_fingerprint: str

    @property
    def num_steps(self) -> int:
        return len(self.noises)


@dataclass
class AttentionTrace:
    """V-value recordings keyed by (site_id, sampling step).

    Inversion records every enumerated site at every step; recordings taken
    during ``reverse`` only cover steps where the UNet actually ran.
    """

    entries: dict[tuple[str, int], torch.Tensor]
    source_fingerprint: str
    resolution: int
    num_steps: int

    def get(self, site_id: str, step: int) -> torch.Tensor:
        return self.entries[(site_id, step)]

    def mean_v(self, site_id: str, step: int) -> torch.Tensor:
        return self.entries[(site_id, step)].mean(dim=0)


@dataclass(frozen=True)
class InjectionWindow:
    """Half-open span of sampling steps where recorded noises replace the model."""

    start_step: int = 5
    end_step: int = 45

    def __post_init__(self):
        if not 0 <= self.start_step < self.end_step:
            raise ConfigurationError(
                f"need 0 <= start_step < end_step, got [{self.start_step}, {self.end_step})")

    def contains(self, step: int) -> bool:
        return self.start_step <= step < self.end_step

    def validated(self, num_steps: int) -> "InjectionWindow":
        if self.end_step > num_steps:
            raise ConfigurationError(
                f"window [{self.start_step}, {self.end_step}) exceeds {num_steps} steps")
        return self

    @classmethod
    def full(cls, num_steps: int) -> "InjectionWindow":
        return cls(0, num_steps)

    @classmethod
    def scaled(cls, start: int, end: int, from_steps: int, to_steps: int) -> "InjectionWindow":
        """Proportionally rescale a window between step-grid sizes."""
        lo = max(0, min(int(start * to_steps / from_steps + 0.5), to_steps - 1))
        hi = max(lo + 1, min(int(end * to_steps / from_steps + 0.5), to_steps))
        return cls(lo, hi)

    @classmethod
    def paper_default(cls, num_steps: int) -> "InjectionWindow":
        """The [5, 45)-of-50 operating window rescaled to ``num_steps``."""
        return cls.scaled(5, 45, 50, num_steps)


@dataclass
class AttentionPolicy:
    """What to do with attention V values while the sampler runs the UNet.

    ``replace_fn(site_id, step, v) -> v'`` is consulted only at steps below
    ``stop_step``; observation (``record``) is unaffected by ``stop_step``.
    After a run with ``mode == "record"`` the sampler deposits the recording
    in ``last_recorded_trace``.
    """

    mode: str = "none"  # "none" | "record" | "replace"
    replace_fn: Callable | None = None
    stop_step: int | None = None
    last_recorded_trace: AttentionTrace | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("none", "record", "replace"):
            raise ConfigurationError(f"unknown policy mode {self.mode!r}")
        if (self.mode == "replace") != (self.replace_fn is not None):
            raise ConfigurationError("replace_fn is required iff mode == 'replace'")

    @classmethod
    def none(cls) -> "AttentionPolicy":
        return cls("none")

    @classmethod
    def record(cls) -> "AttentionPolicy":
        return cls("record")

    @classmethod
    def replace(cls, fn: Callable, stop_step: int | None = None) -> "AttentionPolicy":
        return cls("replace", replace_fn=fn, stop_step=stop_step)


class _Recorder:
    def __init__(self):
        self.entries: dict[tuple[str, int], torch.Tensor] = {}

    def observe(self, site_id, step, q, k, v):
        self.entries[(site_id, step)] = v.detach().squeeze(0).clone()

    def hook(self) -> AttentionHook:
        return AttentionHook(observe=self.observe)


def ddim_transition(z: torch.Tensor, eps: torch.Tensor,
                    alpha_from: float, alpha_to: float) -> torch.Tensor:
    """Move between cumulative-alpha levels with a fixed noise estimate."""
    x0 = (z - math.sqrt(1.0 - alpha_from) * eps) / math.sqrt(alpha_from)
    return math.sqrt(alpha_to) * x0 + math.sqrt(1.0 - alpha_to) * eps


class DiffusionSampler:
    """Inversion and reverse sampling over one frozen backbone.

    All operations are pure with respect to sampler state; a sampler may be
    shared across threads as long as the backbone stays frozen.
    """

    def __init__(self, backbone: Backbone, schedule: DiffusionSchedule | None = None):
        self.backbone = backbone
        self.schedule = schedule or backbone.schedule
        self.fingerprint = _trace_fingerprint(backbone, self.schedule)

    @property
    def num_steps(self) -> int:
        return self.schedule.num_steps

    def subsampled(self, stride: int) -> "DiffusionSampler":
        return DiffusionSampler(self.backbone, self.schedule.subsample(stride))

    def _check_trace(self, trace: NoiseTrace):
        if trace.config_fingerprint != self.fingerprint:
            raise TraceCompatibilityError(
                "noise trace was recorded against a different backbone or step grid")
        if trace.num_steps != self.num_steps:
            raise TraceCompatibilityError(
                f"trace has {trace.num_steps} steps, sampler runs {self.num_steps}")

    def _policy_hooks(self, policy: AttentionPolicy, step: int,
                      recorder: _Recorder | None) -> list[AttentionHook] | None:
        hooks = []
        if recorder is not None:
            hooks.append(recorder.hook())
        stop = self.num_steps if policy.stop_step is None else policy.stop_step
        if policy.mode == "replace" and step < stop:
            fn = policy.replace_fn
            hooks.append(AttentionHook(
                replace_v=lambda site_id, s, v: fn(site_id, s, v)))
        return hooks or None

    def _finish_recording(self, policy: AttentionPolicy, recorder: _Recorder | None):
        if recorder is None:
            return None
        trace = AttentionTrace(entries=recorder.entries,
                               source_fingerprint=self.fingerprint,
                               resolution=self.backbone.config.latent_size,
                               num_steps=self.num_steps)
        policy.last_recorded_trace = trace
        return trace

    def invert(self, latent: torch.Tensor,
               policy: AttentionPolicy | None = None
               ) -> tuple[NoiseTrace, AttentionTrace | None]:
        """Walk a clean latent to the terminal noise level, recording noises.

        Transitions are visited clean-to-noisy, i.e. step ``T - 1`` first,
        so recorded entries line up with the reverse pass.
        """
        policy = policy or AttentionPolicy.none()
        if policy.mode not in ("none", "record"):
            raise ConfigurationError("invert accepts policy mode 'none' or 'record'")
        recorder = _Recorder() if policy.mode == "record" else None
        T = self.num_steps
        noises: list[torch.Tensor | None] = [None] * T
        z = latent
        with torch.no_grad():
            for j in range(T):  # transition j: level j -> j + 1
                step = T - 1 - j
                eps = self.backbone.predict_noise(
                    z, step, hooks=self._policy_hooks(policy, step, recorder),
                    schedule=self.schedule)
                noises[step] = eps.detach().clone()
                alpha_noisy, alpha_clean = self.schedule.transition_for_step(step)
                z = ddim_transition(z, eps, alpha_from=alpha_clean, alpha_to=alpha_noisy)
        trace = NoiseTrace(noises=noises, origin_latent=latent.detach().clone(),
                           terminal_latent=z.detach().clone(),
                           config_fingerprint=self.fingerprint)
        return trace, self._finish_recording(policy, recorder)

    def reverse(self, init: torch.Tensor, trace: NoiseTrace | None = None,
                window: InjectionWindow | None = None,
                policy: AttentionPolicy | None = None, seed: int = 0) -> torch.Tensor:
        """Denoise from the terminal level to a clean latent.

        Steps inside ``window`` consume the recorded noise verbatim and never
        invoke the UNet; steps outside it use the live model prediction (the
        live prediction is never zeroed). ``seed`` is accepted for interface
        symmetry; the eta = 0 sampler draws no noise.
        """
        del seed
        policy = policy or AttentionPolicy.none()
        if trace is not None:
            self._check_trace(trace)
            window = (window or InjectionWindow.full(self.num_steps)).validated(self.num_steps)
        recorder = _Recorder() if policy.mode == "record" else None
        z = init
        for step in range(self.num_steps):
            if trace is not None and window.contains(step):
                eps = trace.noises[step]
            else:
                eps = self.backbone.predict_noise(
                    z, step, hooks=self._policy_hooks(policy, step, recorder),
                    schedule=self.schedule)
            alpha_noisy, alpha_clean = self.schedule.transition_for_step(step)
            z = ddim_transition(z, eps, alpha_from=alpha_noisy, alpha_to=alpha_clean)
        self._finish_recording(policy, recorder)
        return z

    def generate(self, seed: int, policy: AttentionPolicy | None = None
                 ) -> tuple[torch.Tensor, AttentionTrace | None]:
        """Unconditional sample from a seeded Gaussian terminal latent."""
        policy = policy or AttentionPolicy.none()
        gen = torch.Generator().manual_seed(seed)
        init = torch.randn(self.backbone.config.latent_shape, generator=gen)
        with torch.no_grad():
            latent = self.reverse(init, policy=policy)
        return latent, policy.last_recorded_trace


# -- trace persistence -------------------------------------------------------


def save_noise_trace(trace: NoiseTrace, directory: Path | str) -> None:
    directory = Path(directory)
    shape = list(trace.noises[0].shape)
    for step, eps in enumerate(trace.noises):
        tensorio.save_tensor(directory / f"step_{step:04d}.f32", eps)
    tensorio.save_tensor(directory / "origin.f32", trace.origin_latent)
    tensorio.save_tensor(directory / "terminal.f32", trace.terminal_latent)
    tensorio.write_manifest(directory, {
        "format_version": TRACE_FORMAT_VERSION,
        "kind": "noise_trace",
        "step_count": trace.num_steps,
        "shape": shape,
        "fingerprint": trace.config_fingerprint,
    })


def load_noise_trace(directory: Path | str) -> NoiseTrace:
    directory = Path(directory)
    manifest = tensorio.read_manifest(directory)
    if manifest.get("kind") != "noise_trace":
        raise TraceCompatibilityError(f"{directory} is not a noise trace")
    shape = tuple(manifest["shape"])
    noises = [tensorio.load_tensor(directory / f"step_{step:04d}.f32", shape)
              for step in range(manifest["step_count"])]
    return NoiseTrace(noises=noises,
                      origin_latent=tensorio.load_tensor(directory / "origin.f32", shape),
                      terminal_latent=tensorio.load_tensor(directory / "terminal.f32", shape),
                      config_fingerprint=manifest["fingerprint"])


def save_attention_trace(trace: AttentionTrace, directory: Path | str) -> None:
    directory = Path(directory)
    steps: dict[int, list[str]] = {}
    shapes: dict[str, list[int]] = {}
    for (site_id, step), v in sorted(trace.entries.items()):
        steps.setdefault(step, []).append(site_id)
        shapes[site_id] = list(v.shape)
    for step, site_ids in steps.items():
        flat = torch.cat([trace.entries[(sid, step)].reshape(-1) for sid in site_ids])
        tensorio.save_tensor(directory / f"step_{step:04d}.f32", flat)
    tensorio.write_manifest(directory, {
        "format_version": TRACE_FORMAT_VERSION,
        "kind": "attention_trace",
        "step_count": trace.num_steps,
        "resolution": trace.resolution,
        "fingerprint": trace.source_fingerprint,
        "site_shapes": shapes,
        "steps": {str(step): site_ids for step, site_ids in steps.items()},
    })


def load_attention_trace(directory: Path | str) -> AttentionTrace:
    directory = Path(directory)
    manifest = tensorio.read_manifest(directory)
    if manifest.get("kind") != "attention_trace":
        raise TraceCompatibilityError(f"{directory} is not an attention trace")
    shapes = {sid: tuple(shape) for sid, shape in manifest["site_shapes"].items()}
    entries = {}
    for step_str, site_ids in manifest["steps"].items():
        step = int(step_str)
        sizes = [int(torch.tensor(shapes[sid]).prod()) for sid in site_ids]
        flat = tensorio.load_tensor(directory / f"step_{step:04d}.f32", (sum(sizes),))
        offset = 0
        for sid, size in zip(site_ids, sizes):
            entries[(sid, step)] = flat[offset:offset + size].reshape(shapes[sid])
            offset += size
    return AttentionTrace(entries=entries,
                          source_fingerprint=manifest["fingerprint"],
                          resolution=manifest["resolution"],
                          num_steps=manifest["step_count"])
