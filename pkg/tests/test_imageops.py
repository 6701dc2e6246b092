import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffnst.errors import ConfigurationError
from diffnst.imageops import (ColorStats, load_image, match_colors, resize_image,
                              sample_crops, save_image, sobel_map)

from conftest import rand_image


def nonclipping_image(seed: int, size: int = 16, lo: float = 0.3, hi: float = 0.7):
    gen = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(size, size, 3, generator=gen)


class TestMatchColors:
    def test_identity_when_content_equals_style(self):
        image = nonclipping_image(0)
        out = match_colors(image, image)
        assert float((out - image).abs().max()) < 1e-5

    def test_two_pixel_grayscale_closed_form(self):
        # 1-channel oracle: A = sigma_s / sigma_c = 0.2 / 0.1 = 2, so
        # x -> 2 (x - 0.3) + 0.6 maps {0.2, 0.4} onto {0.4, 0.8} exactly.
        content = torch.tensor([[[0.2] * 3, [0.4] * 3]], dtype=torch.float64)
        style = torch.tensor([[[0.4] * 3, [0.8] * 3]], dtype=torch.float64)
        out = match_colors(content, style)
        expected = torch.tensor([[[0.4] * 3, [0.8] * 3]], dtype=torch.float64)
        assert float((out - expected).abs().max()) < 1e-6

    def test_constant_content_maps_to_style_mean(self):
        content = torch.full((8, 8, 3), 0.25)
        style = nonclipping_image(1)
        out = match_colors(content, style)
        mean_s = style.reshape(-1, 3).mean(dim=0)
        assert float((out - mean_s).abs().max()) < 1e-5

    def test_moments_match_style_within_tolerance(self):
        content = nonclipping_image(2, size=32)
        style = nonclipping_image(3, size=32, lo=0.35, hi=0.65)
        out = match_colors(content, style)
        got = ColorStats.of(out)
        want = ColorStats.of(style)
        assert float((got.mean - want.mean).abs().max()) < 1e-3
        assert float((got.covariance - want.covariance).abs().max()) < 1e-3

    def test_idempotent_toward_fixed_style(self):
        content = nonclipping_image(4, size=32)
        style = nonclipping_image(5, size=32, lo=0.35, hi=0.65)
        once = match_colors(content, style)
        twice = match_colors(once, style)
        assert float((twice - once).abs().max()) < 1e-4

    def test_non_finite_input_rejected(self):
        bad = torch.full((4, 4, 3), float("nan"))
        with pytest.raises(ConfigurationError):
            match_colors(bad, nonclipping_image(6, size=4))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=10 ** 6))
    def test_output_always_in_range(self, seed):
        content = rand_image(seed, 8)
        style = rand_image(seed + 1, 8)
        out = match_colors(content, style)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0
        assert torch.isfinite(out).all()


class TestSobel:
    def test_constant_image_maps_to_exact_zero(self):
        image = torch.full((8, 8, 3), 0.37)
        assert torch.equal(sobel_map(image), torch.zeros(8, 8))

    def test_step_edge_hand_convolution(self):
        # Columns 0,0,1,1 with replicate padding: the standard 3x3 kernel
        # responds with 4 * delta in both interior columns, 0 at the borders.
        image = torch.zeros(4, 4, 3)
        image[:, 2:, :] = 1.0
        expected = torch.tensor([[0.0, 4.0, 4.0, 0.0]] * 4)
        assert float((sobel_map(image) - expected).abs().max()) < 1e-5

    def test_translation_equivariance_in_interior(self):
        image = rand_image(7, 16)
        shifted = torch.roll(image, shifts=(0, 3), dims=(0, 1))
        base = sobel_map(image)
        moved = sobel_map(shifted)
        # compare away from the wrap seam and the 1-pixel border
        assert float((moved[1:-1, 4:-1] - torch.roll(base, 3, dims=1)[1:-1, 4:-1])
                     .abs().max()) < 1e-5

    def test_differentiable(self):
        image = rand_image(8, 8).requires_grad_(True)
        sobel_map(image).sum().backward()
        assert image.grad is not None and torch.isfinite(image.grad).all()


class TestSampleCrops:
    def test_constant_image_ties_both_bins_valid(self):
        image = torch.full((16, 16, 3), 0.5)
        sobel = sobel_map(image)
        for bin in ("simple", "complex"):
            crops = sample_crops(image, sobel, n=2, size=4, bin=bin, seed=3)
            assert len(crops) == 2
            assert all(c.shape == (4, 4, 3) for c in crops)

    def test_complex_bin_prefers_textured_half(self):
        image = torch.full((32, 32, 3), 0.5)
        checker = (torch.arange(32)[:, None] + torch.arange(32)[None, :]) % 2
        image[:, 16:, :] = checker[:, 16:, None].float()
        sobel = sobel_map(image)
        _, picks = sample_crops(image, sobel, n=4, size=8, bin="complex", seed=4,
                                return_positions=True)
        for p in picks:
            assert p.left + p.size / 2 > 14  # crop centers on the textured side
        _, simple_picks = sample_crops(image, sobel, n=4, size=8, bin="simple",
                                       seed=4, return_positions=True)
        simple_scores = [float(sobel[p.top:p.top + 8, p.left:p.left + 8].mean())
                         for p in simple_picks]
        complex_scores = [float(sobel[p.top:p.top + 8, p.left:p.left + 8].mean())
                          for p in picks]
        assert max(simple_scores) <= min(complex_scores)
        assert min(complex_scores) > 0

    def test_deterministic_per_seed(self):
        image = rand_image(9, 16)
        sobel = sobel_map(image)
        a = sample_crops(image, sobel, n=1, size=4, bin="complex", seed=11)
        b = sample_crops(image, sobel, n=1, size=4, bin="complex", seed=11)
        assert torch.equal(a[0], b[0])

    def test_simple_scores_never_exceed_complex(self):
        image = rand_image(10, 24)
        sobel = sobel_map(image)
        _, sp = sample_crops(image, sobel, 3, 6, "simple", 5, return_positions=True)
        _, cp = sample_crops(image, sobel, 3, 6, "complex", 5, return_positions=True)
        s_scores = [float(sobel[p.top:p.top + 6, p.left:p.left + 6].mean()) for p in sp]
        c_scores = [float(sobel[p.top:p.top + 6, p.left:p.left + 6].mean()) for p in cp]
        assert max(s_scores) <= min(c_scores)

    def test_oversized_crop_rejected(self):
        image = rand_image(11, 8)
        with pytest.raises(ConfigurationError):
            sample_crops(image, sobel_map(image), n=1, size=16, bin="simple", seed=0)


class TestImageIO:
    def test_png_roundtrip(self, tmp_path):
        image = rand_image(12, 16)
        save_image(image, tmp_path / "x.png")
        loaded = load_image(tmp_path / "x.png")
        assert loaded.shape == (16, 16, 3)
        assert float((loaded - image).abs().max()) <= (0.5 / 255.0) + 1e-6

    def test_load_with_resize(self, tmp_path):
        save_image(rand_image(13, 16), tmp_path / "y.png")
        loaded = load_image(tmp_path / "y.png", size=8)
        assert loaded.shape == (8, 8, 3)

    def test_resize_is_identity_at_same_size(self):
        image = rand_image(14, 16)
        assert torch.equal(resize_image(image, 16), image)
