import numpy as np
import pytest
import torch

from perceptad.features import (CallableExtractor, StageSpec, compute_stats,
                                make_fixed_random_extractor, unit_stats)
from perceptad.losses import (LossConfig, blended_loss, combined_loss, down, pixel_l1,
                              relative_l1_from_features, relative_perceptual_l1,
                              upsample2)


@pytest.fixture(scope="module")
def extractor():
    return make_fixed_random_extractor(seed=5, n_stages=3, channels_per_stage=(8, 16, 32))


@pytest.fixture(scope="module")
def stats(extractor):
    gen = torch.Generator().manual_seed(0)
    imgs = [torch.rand(1, 32, 32, generator=gen) for _ in range(8)]
    return {s: compute_stats(extractor, imgs, s) for s in range(3)}


def rand_image(seed, size=32):
    return torch.rand(1, size, size, generator=torch.Generator().manual_seed(seed))


class TestRelativePerceptualL1:
    def test_identity_is_zero(self, extractor, stats):
        x = rand_image(1)
        assert float(relative_perceptual_l1(x, x, extractor, stats[1], 1)) == 0.0

    def test_injected_feature_oracle(self):
        # f(x)=[1,-1,2], f(xr)=[1,1,2] -> (0+2+0)/(1+1+2) = 0.5
        fx = torch.tensor([[1.0, -1.0, 2.0]])
        fr = torch.tensor([[1.0, 1.0, 2.0]])
        val = float(relative_l1_from_features(fx, fr, epsilon=1e-12))
        assert val == pytest.approx(0.5, abs=1e-9)

    def test_epsilon_guard_zero_reference(self):
        fx = torch.zeros(1, 4)
        fr = torch.ones(1, 4)
        val = float(relative_l1_from_features(fx, fr, epsilon=1e-6))
        assert np.isfinite(val)
        assert val == pytest.approx(4.0 / 1e-6)

    def test_scale_invariance_of_normalized_features(self):
        gen = torch.Generator().manual_seed(2)
        fx = torch.randn(1, 16, 4, 4, generator=gen, dtype=torch.float64)
        fr = torch.randn(1, 16, 4, 4, generator=gen, dtype=torch.float64)
        base = float(relative_l1_from_features(fx, fr, epsilon=1e-300))
        for c in (1e-3, 7.0, 1e4):
            scaled = float(relative_l1_from_features(c * fx, c * fr, epsilon=1e-300))
            assert scaled == pytest.approx(base, rel=1e-9)

    def test_non_negative_finite(self, extractor, stats):
        for seed in range(5):
            v = float(relative_perceptual_l1(rand_image(seed), rand_image(seed + 100),
                                             extractor, stats[2], 2))
            assert np.isfinite(v) and v >= 0

    def test_shape_mismatch_rejected(self, extractor, stats):
        with pytest.raises(ValueError):
            relative_perceptual_l1(rand_image(0, 32), rand_image(0, 16),
                                   extractor, stats[0], 0)

    def test_missing_stats_rejected(self, extractor):
        with pytest.raises(ValueError):
            relative_perceptual_l1(rand_image(0), rand_image(1), extractor, None, 0)


class TestDown:
    def test_constant_preserved(self):
        x = torch.full((1, 8, 8), 0.3)
        out = down(x)
        assert out.shape == (1, 4, 4)
        assert torch.allclose(out, torch.full_like(out, 0.3))

    def test_block_average_oracle(self):
        x = torch.tensor([[[0.0, 0.0], [1.0, 1.0]]])
        assert down(x).item() == pytest.approx(0.5)

    def test_repeated_shape(self):
        x = torch.rand(1, 32, 32)
        assert down(down(x)).shape == (1, 8, 8)

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError):
            down(torch.rand(1, 5, 5))

    def test_upsample_is_right_inverse(self):
        x = torch.rand(1, 8, 8)
        assert torch.equal(down(upsample2(x)), x)


class TestBlendedLoss:
    def test_endpoints_exact(self, extractor, stats):
        x, xr = rand_image(3), rand_image(4)
        at0 = float(blended_loss(x, xr, 0.0, extractor, stats[0], stats[1], 0, 1))
        low = float(relative_perceptual_l1(down(x), down(xr), extractor, stats[0], 0))
        assert at0 == low
        at1 = float(blended_loss(x, xr, 1.0, extractor, stats[0], stats[1], 0, 1))
        high = float(relative_perceptual_l1(x, xr, extractor, stats[1], 1))
        assert at1 == high

    def test_midpoint_oracle_with_stubbed_terms(self):
        # Stub extractor engineered so the low term is 0.2 and the high term
        # 0.6; at alpha=0.5 the blend must be 0.4.
        def fn(imgs, stage):
            m = imgs.mean(dim=(1, 2, 3), keepdim=True)
            h = imgs.shape[-1] // (2 ** (stage + 1))
            if stage == 0:
                ch0 = (m / (h * h)).expand(-1, 1, h, h)
                ch1 = torch.full_like(ch0, 2.0 / (h * h))
                return torch.cat([ch0, ch1], dim=1)
            return (m / (h * h)).expand(-1, 1, h, h)

        ex = CallableExtractor(fn, stages=[StageSpec(0, 2, 2), StageSpec(1, 4, 1)],
                               input_channels=1)
        x = torch.ones(1, 8, 8)
        xr = torch.full((1, 8, 8), 0.4)
        low = float(relative_perceptual_l1(down(x), down(xr), ex, unit_stats(0, 2), 0,
                                           epsilon=1e-300))
        high = float(relative_perceptual_l1(x, xr, ex, unit_stats(1, 1), 1,
                                            epsilon=1e-300))
        assert low == pytest.approx(0.2, abs=1e-7)
        assert high == pytest.approx(0.6, abs=1e-7)
        mid = float(blended_loss(x, xr, 0.5, ex, unit_stats(0, 2), unit_stats(1, 1),
                                 0, 1, epsilon=1e-300))
        assert mid == pytest.approx(0.4, abs=1e-7)

    def test_affine_in_alpha(self, extractor, stats):
        x, xr = rand_image(5), rand_image(6)

        def L(a):
            return float(blended_loss(x, xr, a, extractor, stats[1], stats[2], 1, 2))
        l0, l5, l1 = L(0.0), L(0.5), L(1.0)
        assert l5 == pytest.approx((l0 + l1) / 2, abs=1e-12)

    def test_alpha_out_of_range(self, extractor, stats):
        with pytest.raises(ValueError):
            blended_loss(rand_image(0), rand_image(1), 1.5, extractor,
                         stats[0], stats[1], 0, 1)


class TestCombinedLoss:
    def test_zero_weight_identical(self, extractor, stats):
        x, xr = rand_image(7), rand_image(8)
        cfg = LossConfig(l1_weight=0.0)
        a = combined_loss(x, xr, extractor, stats[1], 1, cfg)
        b = relative_perceptual_l1(x, xr, extractor, stats[1], 1, cfg.epsilon)
        assert torch.equal(a, b)

    def test_identity_zero(self, extractor, stats):
        x = rand_image(9)
        cfg = LossConfig(l1_weight=0.5)
        assert float(combined_loss(x, x, extractor, stats[1], 1, cfg)) == 0.0

    def test_additive_oracle(self):
        # perceptual 0.5, mean abs pixel diff 0.1, weight 0.1 -> 0.51
        assert 0.5 + 0.1 * 0.1 == pytest.approx(0.51)

    def test_additive_term_value(self, extractor, stats):
        x = rand_image(10)
        xr = x + 0.1
        cfg = LossConfig(l1_weight=0.1)
        base = float(relative_perceptual_l1(x, xr, extractor, stats[1], 1, cfg.epsilon))
        combo = float(combined_loss(x, xr, extractor, stats[1], 1, cfg))
        assert combo == pytest.approx(base + 0.1 * 0.1, rel=1e-5)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        LossConfig(l1_weight=-1.0)


def test_pixel_l1_oracle():
    x = torch.zeros(1, 4, 4)
    xr = torch.full((1, 4, 4), 0.25)
    assert float(pixel_l1(x, xr)) == pytest.approx(0.25)
