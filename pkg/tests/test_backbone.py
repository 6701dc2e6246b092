import pytest
import torch

from diffnst.backbone import (AttentionHook, Backbone, BackboneConfig,
                              DiffusionSchedule, attention_site_plan)
from diffnst.errors import ConfigurationError, HookRegistrationError

from conftest import TINY, rand_image, rand_latent


class TestShapes:
    def test_default_config_latent_shape(self):
        cfg = BackboneConfig()
        assert cfg.image_size == 64 and cfg.downsample_factor == 4
        assert cfg.latent_shape == (4, 16, 16)

    def test_encode_shape_and_determinism(self, tiny_backbone):
        image = rand_image(0)
        z1 = tiny_backbone.encode(image)
        z2 = tiny_backbone.encode(image)
        assert z1.shape == (4, 8, 8)
        assert torch.equal(z1, z2)

    def test_batched_encode_matches_looped(self, tiny_backbone):
        images = torch.stack([rand_image(1), rand_image(2)])
        batched = tiny_backbone.encode(images)
        looped = torch.stack([tiny_backbone.encode(images[i]) for i in range(2)])
        assert batched.shape[0] == 2
        torch.testing.assert_close(batched, looped, atol=1e-5, rtol=0)

    def test_decode_range_and_shape(self, tiny_backbone):
        z = rand_latent(3, tiny_backbone.config.latent_shape)
        image = tiny_backbone.decode(z)
        assert image.shape == (32, 32, 3)
        assert float(image.min()) >= 0.0 and float(image.max()) <= 1.0

    def test_decode_zero_latent_finite(self, tiny_backbone):
        image = tiny_backbone.decode(torch.zeros(tiny_backbone.config.latent_shape))
        assert torch.isfinite(image).all()
        assert float(image.min()) >= 0.0 and float(image.max()) <= 1.0

    def test_encode_rejects_wrong_size(self, tiny_backbone):
        with pytest.raises(ConfigurationError):
            tiny_backbone.encode(torch.rand(16, 16, 3))

    def test_decode_rejects_wrong_shape(self, tiny_backbone):
        with pytest.raises(ConfigurationError):
            tiny_backbone.decode(torch.rand(2, 8, 8))


class TestConfig:
    def test_validation_errors(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig(image_size=30)  # not divisible by 4
        with pytest.raises(ConfigurationError):
            BackboneConfig(unet_channel_widths=[])
        with pytest.raises(ConfigurationError):
            BackboneConfig(unet_channel_widths=[64, 100])  # 100 % 8 != 0
        with pytest.raises(ConfigurationError):
            BackboneConfig(sampling_steps=2000)

    def test_json_roundtrip_field_names(self):
        cfg = BackboneConfig(**TINY)
        data = cfg.to_json_dict()
        assert set(data) == {"image_size", "latent_channels", "downsample_factor",
                             "unet_channel_widths", "attention_head_count",
                             "v_dim_per_site", "train_timesteps", "sampling_steps"}
        assert BackboneConfig.from_json_dict(data) == cfg


class TestSchedule:
    def test_monotonicity_and_range(self, tiny_backbone):
        sched = tiny_backbone.schedule
        assert torch.all(sched.alpha_bars[1:] < sched.alpha_bars[:-1])
        assert sched.alpha_bars[0] > 0.99
        assert torch.all(sched.alpha_bars > 0) and torch.all(sched.alpha_bars < 1)
        idx = sched.sampling_indices
        assert all(a < b for a, b in zip(idx, idx[1:]))

    def test_step_to_timestep_is_reverse_ordered(self, tiny_backbone):
        sched = tiny_backbone.schedule
        taus = [sched.timestep_for_step(s) for s in range(sched.num_steps)]
        assert taus[0] == sched.sampling_indices[-1]  # step 0 is noisiest
        assert all(a > b for a, b in zip(taus, taus[1:]))

    def test_invalid_indices_rejected(self):
        betas = torch.linspace(1e-4, 0.02, 100)
        with pytest.raises(ConfigurationError):
            DiffusionSchedule(betas, [5, 5, 10])
        with pytest.raises(ConfigurationError):
            DiffusionSchedule(betas, [0, 200])

    def test_subsample_keeps_noisiest(self, tiny_backbone):
        sub = tiny_backbone.schedule.subsample(2)
        assert sub.sampling_indices[-1] == tiny_backbone.schedule.sampling_indices[-1]
        assert sub.num_steps == 3


class TestAttentionSites:
    def test_enumeration_complete_and_unique(self, tiny_backbone):
        sites = tiny_backbone.enumerate_attention_sites()
        ids = [s.site_id for s in sites]
        assert len(ids) == len(set(ids)) == 5  # 2 down + mid + 2 up
        halves = {s.half for s in sites}
        assert halves == {"down", "mid", "up"}

    def test_default_config_site_count(self):
        sites = attention_site_plan(BackboneConfig())
        assert len(sites) == 7  # 3 down + mid + 3 up
        assert [s.v_dim for s in sites] == [64, 128, 256, 256, 256, 128, 64]

    def test_two_constructions_identical(self, tiny_config):
        a = Backbone(tiny_config, seed=0).enumerate_attention_sites()
        b = Backbone(tiny_config, seed=0).enumerate_attention_sites()
        assert a == b

    def test_decoder_filter_is_proper_subset(self, tiny_backbone):
        total = tiny_backbone.enumerate_attention_sites()
        decoder = tiny_backbone.decoder_sites()
        assert 0 < len(decoder) < len(total)
        assert all(s.half == "up" for s in decoder)


class TestHooks:
    def test_observe_only_is_transparent(self, tiny_backbone):
        z = rand_latent(4, tiny_backbone.config.latent_shape)
        seen = []
        hook = AttentionHook(observe=lambda sid, step, q, k, v: seen.append(sid))
        base = tiny_backbone.predict_noise(z, step=2)
        hooked = tiny_backbone.predict_noise(z, step=2, hooks=[hook])
        assert torch.equal(base, hooked)
        assert len(seen) == 5

    def test_identity_replacement_is_transparent(self, tiny_backbone):
        z = rand_latent(5, tiny_backbone.config.latent_shape)
        hook = AttentionHook(replace_v=lambda sid, step, v: v)
        base = tiny_backbone.predict_noise(z, step=0)
        hooked = tiny_backbone.predict_noise(z, step=0, hooks=[hook])
        assert torch.equal(base, hooked)

    def test_zeroing_decoder_v_changes_output(self, tiny_backbone):
        z = rand_latent(6, tiny_backbone.config.latent_shape)
        decoder_ids = tuple(s.site_id for s in tiny_backbone.decoder_sites())
        hook = AttentionHook(replace_v=lambda sid, step, v: torch.zeros_like(v),
                             sites=decoder_ids)
        base = tiny_backbone.predict_noise(z, step=1)
        hooked = tiny_backbone.predict_noise(z, step=1, hooks=[hook])
        assert float((base - hooked).abs().max()) > 0

    def test_unknown_site_rejected(self, tiny_backbone):
        z = rand_latent(7, tiny_backbone.config.latent_shape)
        hook = AttentionHook(observe=lambda *a: None, sites=("nowhere.attn9",))
        with pytest.raises(HookRegistrationError):
            tiny_backbone.predict_noise(z, step=0, hooks=[hook])

    def test_bad_replacement_shape_rejected(self, tiny_backbone):
        z = rand_latent(8, tiny_backbone.config.latent_shape)
        hook = AttentionHook(replace_v=lambda sid, step, v: v[..., :-1])
        with pytest.raises(HookRegistrationError):
            tiny_backbone.predict_noise(z, step=0, hooks=[hook])


class TestFrozenContract:
    def test_frozen_parameters(self, tiny_backbone):
        assert tiny_backbone.frozen
        assert all(not p.requires_grad for p in tiny_backbone.unet.parameters())
        assert all(not p.requires_grad for p in tiny_backbone.autoencoder.parameters())

    def test_checksum_stable_under_inference(self, tiny_backbone):
        before = tiny_backbone.parameter_checksum()
        tiny_backbone.predict_noise(rand_latent(9, tiny_backbone.config.latent_shape), 0)
        assert tiny_backbone.parameter_checksum() == before

    def test_deterministic_predictions(self, tiny_backbone):
        z = rand_latent(10, tiny_backbone.config.latent_shape)
        a = tiny_backbone.predict_noise(z, step=3)
        b = tiny_backbone.predict_noise(z, step=3)
        assert torch.equal(a, b)


class TestPersistence:
    def test_save_load_bit_exact(self, tiny_backbone, tmp_path):
        tiny_backbone.save(tmp_path / "bb")
        loaded = Backbone.load(tmp_path / "bb")
        assert loaded.fingerprint() == tiny_backbone.fingerprint()
        for (name_a, t_a), (name_b, t_b) in zip(
                sorted(tiny_backbone._state_dict().items()),
                sorted(loaded._state_dict().items())):
            assert name_a == name_b
            assert torch.equal(t_a, t_b), name_a
        z = rand_latent(11, tiny_backbone.config.latent_shape)
        assert torch.equal(tiny_backbone.predict_noise(z, 0), loaded.predict_noise(z, 0))

    def test_load_rejects_non_backbone_dir(self, tmp_path):
        from diffnst import tensorio
        tensorio.write_manifest(tmp_path / "x", {"kind": "other"})
        with pytest.raises(ConfigurationError):
            Backbone.load(tmp_path / "x")
