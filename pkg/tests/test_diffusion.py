import numpy as np
import pytest
import torch

from diffnst.backbone import Backbone, BackboneConfig, DiffusionSchedule
from diffnst.diffusion import (AttentionPolicy, DiffusionSampler, InjectionWindow,
                               load_attention_trace, load_noise_trace,
                               save_attention_trace, save_noise_trace)
from diffnst.errors import ConfigurationError, TraceCompatibilityError

from conftest import TINY, rand_latent


def rel_l2(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(torch.linalg.vector_norm(a - b) / torch.linalg.vector_norm(b))


class _ZeroBackbone:
    """Stub predicting zero noise; exposes just what the sampler touches."""

    def __init__(self, sampling_steps: int, train_timesteps: int = 1000):
        self.config = BackboneConfig(sampling_steps=sampling_steps,
                                     train_timesteps=train_timesteps)
        self.schedule = DiffusionSchedule.for_config(self.config)
        self.sites = []

    def predict_noise(self, latent, step, hooks=None, schedule=None):
        return torch.zeros_like(latent)

    def enumerate_attention_sites(self):
        return []

    def fingerprint(self):
        return "zero-stub"


class _CountingBackbone:
    """Delegating wrapper that counts predict_noise calls per step."""

    def __init__(self, inner):
        self.inner = inner
        self.config = inner.config
        self.schedule = inner.schedule
        self.calls: dict[int, int] = {}

    def predict_noise(self, latent, step, hooks=None, schedule=None):
        self.calls[step] = self.calls.get(step, 0) + 1
        return self.inner.predict_noise(latent, step, hooks=hooks, schedule=schedule)

    def enumerate_attention_sites(self):
        return self.inner.enumerate_attention_sites()

    def fingerprint(self):
        return self.inner.fingerprint()


def numpy_ddim_forward_zero_eps(z0: np.ndarray, sampling_steps: int) -> np.ndarray:
    """Independent oracle: closed-form inversion terminal with eps = 0.

    With zero noise every transition is a pure scale, so the terminal state
    telescopes to sqrt(alpha_bar[last sampling index]) * z0.
    """
    betas = np.linspace(1e-4, 0.02, 1000)
    alpha_bars = np.cumprod(1.0 - betas)
    indices = np.round(np.linspace(0, 999, sampling_steps)).astype(int)
    return np.sqrt(alpha_bars[indices[-1]]) * z0


def numpy_ddim_reverse(init: np.ndarray, noises: list[np.ndarray],
                       schedule: DiffusionSchedule) -> np.ndarray:
    """Independent replay of the reverse pass using recorded noises only."""
    z = init.astype(np.float64)
    T = schedule.num_steps
    for step in range(T):
        j = T - 1 - step
        a_noisy = schedule.alpha_bar_at_level(j + 1)
        a_clean = schedule.alpha_bar_at_level(j)
        eps = noises[step].astype(np.float64)
        x0 = (z - np.sqrt(1 - a_noisy) * eps) / np.sqrt(a_noisy)
        z = np.sqrt(a_clean) * x0 + np.sqrt(1 - a_clean) * eps
    return z


@pytest.fixture(scope="module")
def sampler(tiny_backbone):
    return DiffusionSampler(tiny_backbone)


class TestInvert:
    def test_trace_length_is_50_under_default_config(self):
        backbone = Backbone(BackboneConfig(), seed=0)
        z = rand_latent(0, backbone.config.latent_shape)
        trace, attn = DiffusionSampler(backbone).invert(z)
        assert trace.num_steps == 50
        assert attn is None

    def test_record_covers_every_site_and_step(self, tiny_backbone, sampler):
        z = rand_latent(1, tiny_backbone.config.latent_shape)
        _, attn = sampler.invert(z, policy=AttentionPolicy.record())
        sites = tiny_backbone.enumerate_attention_sites()
        expected = {(s.site_id, step) for s in sites for step in range(6)}
        assert set(attn.entries) == expected

    def test_zero_eps_stub_matches_closed_form(self):
        stub = _ZeroBackbone(sampling_steps=2)
        s = DiffusionSampler(stub)
        z0 = rand_latent(2, stub.config.latent_shape, scale=1.0)
        trace, _ = s.invert(z0)
        assert all(torch.equal(eps, torch.zeros_like(eps)) for eps in trace.noises)
        expected = numpy_ddim_forward_zero_eps(z0.numpy().astype(np.float64), 2)
        np.testing.assert_allclose(trace.terminal_latent.numpy(), expected, rtol=1e-5)

    def test_invert_rejects_replace_policy(self, sampler, tiny_backbone):
        z = rand_latent(3, tiny_backbone.config.latent_shape)
        policy = AttentionPolicy.replace(lambda sid, step, v: v)
        with pytest.raises(ConfigurationError):
            sampler.invert(z, policy=policy)


class TestReverse:
    def test_round_trip_identity(self, sampler, tiny_backbone):
        for seed in range(3):
            z0 = rand_latent(10 + seed, tiny_backbone.config.latent_shape)
            trace, _ = sampler.invert(z0)
            recon = sampler.reverse(trace.terminal_latent, trace=trace,
                                    window=InjectionWindow.full(6))
            assert rel_l2(recon, z0) < 1e-4

    def test_reverse_matches_independent_replay(self, sampler, tiny_backbone):
        z0 = rand_latent(20, tiny_backbone.config.latent_shape)
        trace, _ = sampler.invert(z0)
        ours = sampler.reverse(trace.terminal_latent, trace=trace,
                               window=InjectionWindow.full(6))
        oracle = numpy_ddim_reverse(trace.terminal_latent.numpy(),
                                    [n.numpy() for n in trace.noises],
                                    sampler.schedule)
        np.testing.assert_allclose(ours.numpy(), oracle, atol=1e-5)

    def test_injected_steps_skip_the_model(self, tiny_backbone):
        counting = _CountingBackbone(tiny_backbone)
        s = DiffusionSampler(counting)
        z0 = rand_latent(21, tiny_backbone.config.latent_shape)
        trace, _ = s.invert(z0)
        counting.calls.clear()
        window = InjectionWindow(2, 4)
        s.reverse(trace.terminal_latent, trace=trace, window=window)
        for step in range(6):
            expected = 0 if window.contains(step) else 1
            assert counting.calls.get(step, 0) == expected, f"step {step}"

    def test_identity_replacement_matches_none_policy(self, sampler, tiny_backbone):
        z0 = rand_latent(22, tiny_backbone.config.latent_shape)
        trace, _ = sampler.invert(z0)
        window = InjectionWindow(1, 5)
        base = sampler.reverse(trace.terminal_latent, trace=trace, window=window)
        identity = AttentionPolicy.replace(lambda sid, step, v: v)
        same = sampler.reverse(trace.terminal_latent, trace=trace, window=window,
                               policy=identity)
        assert torch.equal(base, same)

    def test_monotone_fidelity_as_window_widens(self, sampler, tiny_backbone):
        errors = {"full": [], "mid": [], "empty": []}
        mid = InjectionWindow.paper_default(6)
        for seed in range(5):
            z0 = rand_latent(30 + seed, tiny_backbone.config.latent_shape)
            trace, _ = sampler.invert(z0)
            term = trace.terminal_latent
            errors["full"].append(rel_l2(
                sampler.reverse(term, trace=trace, window=InjectionWindow.full(6)), z0))
            errors["mid"].append(rel_l2(
                sampler.reverse(term, trace=trace, window=mid), z0))
            errors["empty"].append(rel_l2(sampler.reverse(term), z0))
        mean = {k: float(np.mean(v)) for k, v in errors.items()}
        assert mean["full"] <= mean["mid"] <= mean["empty"]

    def test_reverse_does_not_mutate_traces(self, sampler, tiny_backbone):
        z0 = rand_latent(40, tiny_backbone.config.latent_shape)
        trace, attn = sampler.invert(z0, policy=AttentionPolicy.record())
        noise_copies = [n.clone() for n in trace.noises]
        attn_copies = {k: v.clone() for k, v in attn.entries.items()}
        sampler.reverse(trace.terminal_latent, trace=trace,
                        window=InjectionWindow(1, 5))
        assert all(torch.equal(a, b) for a, b in zip(trace.noises, noise_copies))
        assert all(torch.equal(attn.entries[k], attn_copies[k]) for k in attn_copies)

    def test_fingerprint_mismatch_rejected(self, sampler, tiny_config):
        other = Backbone(tiny_config, seed=99)
        other_sampler = DiffusionSampler(other)
        z0 = rand_latent(41, tiny_config.latent_shape)
        trace, _ = other_sampler.invert(z0)
        with pytest.raises(TraceCompatibilityError):
            sampler.reverse(trace.terminal_latent, trace=trace)

    def test_window_validation(self, sampler, tiny_backbone):
        z0 = rand_latent(42, tiny_backbone.config.latent_shape)
        trace, _ = sampler.invert(z0)
        with pytest.raises(ConfigurationError):
            sampler.reverse(trace.terminal_latent, trace=trace,
                            window=InjectionWindow(0, 7))
        with pytest.raises(ConfigurationError):
            InjectionWindow(4, 4)


class TestGenerate:
    def test_seed_determinism(self, sampler):
        a, _ = sampler.generate(seed=5)
        b, _ = sampler.generate(seed=5)
        assert torch.equal(a, b)

    def test_different_seeds_differ(self, sampler):
        a, _ = sampler.generate(seed=5)
        b, _ = sampler.generate(seed=6)
        assert float((a - b).abs().max()) > 0

    def test_capture_replay_is_bit_identical(self, sampler, tiny_backbone):
        latent, trace = sampler.generate(seed=7, policy=AttentionPolicy.record())
        decoder_ids = {s.site_id for s in tiny_backbone.decoder_sites()}

        def replay(site_id, step, v):
            if site_id in decoder_ids and (site_id, step) in trace.entries:
                val = trace.entries[(site_id, step)]
                return val.unsqueeze(0) if v.dim() == 3 else val
            return v

        replayed, _ = sampler.generate(seed=7, policy=AttentionPolicy.replace(replay))
        assert torch.equal(latent, replayed)


class TestWindowScaling:
    def test_paper_default_at_50(self):
        win = InjectionWindow.paper_default(50)
        assert (win.start_step, win.end_step) == (5, 45)

    def test_paper_default_at_10(self):
        win = InjectionWindow.paper_default(10)
        assert (win.start_step, win.end_step) == (1, 9)


class TestTracePersistence:
    def test_noise_trace_roundtrip_bit_exact(self, sampler, tiny_backbone, tmp_path):
        z0 = rand_latent(50, tiny_backbone.config.latent_shape)
        trace, _ = sampler.invert(z0)
        save_noise_trace(trace, tmp_path / "trace")
        loaded = load_noise_trace(tmp_path / "trace")
        assert loaded.config_fingerprint == trace.config_fingerprint
        assert torch.equal(loaded.origin_latent, trace.origin_latent)
        assert torch.equal(loaded.terminal_latent, trace.terminal_latent)
        assert all(torch.equal(a, b) for a, b in zip(loaded.noises, trace.noises))
        # the loaded trace replays identically
        a = sampler.reverse(trace.terminal_latent, trace=trace)
        b = sampler.reverse(loaded.terminal_latent, trace=loaded)
        assert torch.equal(a, b)

    def test_attention_trace_roundtrip_bit_exact(self, sampler, tiny_backbone, tmp_path):
        z0 = rand_latent(51, tiny_backbone.config.latent_shape)
        _, attn = sampler.invert(z0, policy=AttentionPolicy.record())
        save_attention_trace(attn, tmp_path / "attn")
        loaded = load_attention_trace(tmp_path / "attn")
        assert set(loaded.entries) == set(attn.entries)
        assert loaded.source_fingerprint == attn.source_fingerprint
        assert loaded.resolution == attn.resolution
        assert all(torch.equal(loaded.entries[k], attn.entries[k]) for k in attn.entries)
