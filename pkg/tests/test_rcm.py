import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rccmnet.rcm import downsample_logits, fuse_features, region_probability_maps


def _level_maps(values, h=3, w=4):
    """Four (1, 2, h, w) logit maps whose plaque channel is constant."""
    maps = []
    for v in values:
        s = torch.zeros(1, 2, h, w, dtype=torch.float64)
        s[:, 1] = v
        maps.append(s)
    return maps


class TestDownsample:
    def test_constant_stays_constant(self):
        s = torch.full((2, 96, 144), 1.7, dtype=torch.float64)
        for target in [(6, 9), (12, 18), (48, 72), (5, 7)]:
            out = downsample_logits(s, target)
            assert out.shape == (1, *target)
            assert torch.allclose(out, torch.full_like(out, 1.7), atol=1e-12)

    def test_identity_size(self):
        s = torch.randn(2, 2, 6, 9)
        assert torch.equal(downsample_logits(s, (6, 9)), s[:, 1:2])

    def test_shape(self):
        assert downsample_logits(torch.randn(2, 96, 144), (6, 9)).shape == (1, 6, 9)
        assert downsample_logits(torch.randn(3, 2, 96, 144), (6, 9)).shape == (3, 1, 6, 9)

    def test_target_too_large(self):
        with pytest.raises(ValueError):
            downsample_logits(torch.randn(2, 6, 9), (12, 9))


class TestRegionProbabilities:
    def test_equal_logits_quarter(self):
        p = region_probability_maps(_level_maps([0.3] * 4), (3, 4))
        assert torch.allclose(p, torch.full_like(p, 0.25), atol=1e-15)

    def test_one_hot_logit(self):
        p = region_probability_maps(_level_maps([1, 0, 0, 0]), (3, 4))
        # oracle: e / (e + 3) = 0.47537 and 1 / (e + 3) = 0.17488
        e = math.e
        expected = torch.tensor([e / (e + 3), 1 / (e + 3), 1 / (e + 3), 1 / (e + 3)], dtype=torch.float64)
        assert torch.allclose(p[0, :, 0, 0], expected, atol=1e-12)
        # the commonly quoted 4-digit values are off by one in the last place
        assert torch.allclose(p[0, :, 0, 0], torch.tensor([0.4755, 0.1748, 0.1748, 0.1748], dtype=torch.float64), atol=2e-4)

    def test_large_logit_stable(self):
        p = region_probability_maps(_level_maps([100, 0, 0, 0]), (3, 4))
        assert torch.isfinite(p).all()
        assert torch.allclose(p[0, :, 0, 0], torch.tensor([1.0, 0, 0, 0], dtype=torch.float64), atol=1e-40)
        p = region_probability_maps(_level_maps([1000, 0, 0, 0]), (3, 4))
        assert torch.isfinite(p).all()

    def test_requires_four(self):
        with pytest.raises(ValueError):
            region_probability_maps(_level_maps([0, 0, 0]), (3, 4))

    def test_non_finite(self):
        maps = _level_maps([0, 0, 0, 0])
        maps[2][0, 1, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            region_probability_maps(maps, (3, 4))

    def test_classes_axis(self):
        maps = [torch.randn(2, 2, 8, 12, dtype=torch.float64) for _ in range(4)]
        p = region_probability_maps(maps, (8, 12), axis="classes")
        for i, s in enumerate(maps):
            assert torch.allclose(p[:, i], torch.softmax(s, dim=1)[:, 1], atol=1e-15)
        with pytest.raises(ValueError):
            region_probability_maps(maps, (8, 12), axis="pixels")

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
    def test_normalised_and_shift_invariant(self, seed, shift):
        gen = torch.Generator().manual_seed(seed)
        maps = [torch.randn(2, 2, 16, 24, generator=gen, dtype=torch.float64) * 5 for _ in range(4)]
        p = region_probability_maps(maps, (4, 6))
        assert torch.allclose(p.sum(dim=1), torch.ones(2, 4, 6, dtype=torch.float64), atol=1e-6)
        assert (p >= 0).all() and (p <= 1).all()
        q = region_probability_maps([m + shift for m in maps], (4, 6))
        assert torch.allclose(p, q, atol=1e-6)


class TestFuse:
    def test_uniform_probs(self):
        m = torch.randn(2, 5, 3, 4, dtype=torch.float64)
        p = torch.full((2, 4, 3, 4), 0.25, dtype=torch.float64)
        # 0.25 * (0.1 + 0.2 + 0.3 + 0.4) = 0.25
        assert torch.allclose(fuse_features(p, m), 0.25 * m, atol=1e-15)

    def test_zero_alpha(self):
        m = torch.randn(1, 3, 2, 2)
        p = torch.softmax(torch.randn(1, 4, 2, 2), dim=1)
        assert torch.count_nonzero(fuse_features(p, m, (0, 0, 0, 0))) == 0

    def test_single_level(self):
        m = torch.randn(1, 3, 2, 2, dtype=torch.float64)
        p = torch.zeros(1, 4, 2, 2, dtype=torch.float64)
        p[:, 3] = 1
        assert torch.allclose(fuse_features(p, m), 0.4 * m, atol=1e-15)

    def test_pixelwise_broadcast(self):
        m = torch.ones(1, 3, 2, 2, dtype=torch.float64)
        p = torch.zeros(1, 4, 2, 2, dtype=torch.float64)
        p[0, 0, 0, 0] = 1  # alpha 0.1 at pixel (0, 0)
        p[0, 3, 1, 1] = 1  # alpha 0.4 at pixel (1, 1)
        fm = fuse_features(p, m)
        assert torch.allclose(fm[0, :, 0, 0], torch.full((3,), 0.1, dtype=torch.float64))
        assert torch.allclose(fm[0, :, 1, 1], torch.full((3,), 0.4, dtype=torch.float64))
        assert torch.count_nonzero(fm[0, :, 0, 1]) == 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fuse_features(torch.rand(1, 4, 3, 3), torch.rand(1, 2, 3, 4))

    def test_linearity(self):
        gen = torch.Generator().manual_seed(0)
        p = torch.softmax(torch.randn(2, 4, 3, 5, generator=gen, dtype=torch.float64), dim=1)
        m1, m2 = (torch.randn(2, 6, 3, 5, generator=gen, dtype=torch.float64) for _ in range(2))
        a, b = 0.7, -1.3
        assert torch.allclose(fuse_features(p, a * m1 + b * m2), a * fuse_features(p, m1) + b * fuse_features(p, m2), atol=1e-12)
        al1 = (0.3, -0.2, 0.5, 1.1)
        al2 = (0.1, 0.9, -0.4, 0.2)
        mix = tuple(a * x + b * y for x, y in zip(al1, al2))
        assert torch.allclose(
            fuse_features(p, m1, mix), a * fuse_features(p, m1, al1) + b * fuse_features(p, m1, al2), atol=1e-12
        )
