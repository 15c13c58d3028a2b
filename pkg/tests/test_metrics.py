import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qanet.metrics import (CMSE_FLOOR, EvalReport, bicubic_upsample, brightness_bias, cmse, cpsnr, cssim,
                           evaluate_with_shift_search, gaussian_window, mean_bicubic_baseline, ssim_map)


def textured(seed, shape=(30, 30)):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.1, 0.9, shape)


class TestCPSNR:
    def test_worked_example(self):
        hr, sr = np.array([0.6, 0.4]), np.array([0.5, 0.5])
        assert brightness_bias(hr, sr) == 0.0
        assert cmse(hr, sr) == pytest.approx(0.01, abs=1e-15)
        assert cpsnr(hr, sr) == pytest.approx(20.0, abs=1e-12)

    def test_bias_example(self):
        hr = np.array([0.5, 0.5, 0.5])
        assert brightness_bias(hr, hr - 0.1) == pytest.approx(0.1, abs=1e-15)

    def test_residual_doubling(self):
        hr = textured(0)
        sr = hr + np.random.default_rng(1).normal(0, 0.01, hr.shape)
        sr2 = hr + 2 * (sr - hr)
        assert cpsnr(hr, sr) - cpsnr(hr, sr2) == pytest.approx(20 * math.log10(2), abs=1e-9)
        assert 20 * math.log10(2) == pytest.approx(6.0206, abs=1e-4)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-0.5, 0.5), st.integers(0, 10_000))
    def test_offset_invariance(self, c, seed):
        hr = textured(seed, (8, 8))
        sr = hr + np.random.default_rng(seed + 1).normal(0, 0.02, hr.shape)
        assert abs(cpsnr(hr, sr + c) - cpsnr(hr, sr)) < 1e-9

    def test_perfect_is_capped(self):
        hr = textured(2)
        assert cmse(hr, hr) == CMSE_FLOOR
        assert cpsnr(hr, hr) == 100.0
        assert cpsnr(hr, hr + 0.25) == pytest.approx(100.0)

    def test_masked_pixels_ignored(self):
        hr, sr = textured(3), textured(4)
        mask = np.zeros(hr.shape)
        mask[:10] = 1
        assert cpsnr(hr, np.where(mask > 0, sr, 123.0), mask) == cpsnr(hr, sr, mask)

    def test_no_clear_pixels(self):
        with pytest.raises(ValueError, match="clear pixels"):
            cpsnr(np.ones(4), np.ones(4), np.zeros(4))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            cpsnr(np.ones(4), np.ones(5))


class TestSSIM:
    def test_window_normalized(self):
        w = gaussian_window()
        assert w.shape == (11, 11) and w.sum() == pytest.approx(1.0)

    def test_identical_is_one(self):
        hr = textured(5)
        assert cssim(hr, hr) == pytest.approx(1.0, abs=1e-12)

    def test_degrades_with_noise(self):
        hr = textured(6)
        rng = np.random.default_rng(0)
        a = cssim(hr, hr + rng.normal(0, 0.01, hr.shape))
        b = cssim(hr, hr + rng.normal(0, 0.1, hr.shape))
        assert 1.0 > a > b

    def test_symmetric(self):
        a, b = textured(7), textured(8)
        assert np.allclose(ssim_map(a, b), ssim_map(b, a))


class TestShiftSearch:
    @pytest.mark.parametrize("u", range(-3, 4))
    @pytest.mark.parametrize("v", range(-3, 4))
    def test_translated_perfect_sr_hits_cap(self, u, v):
        big = textured(9, (40, 40))
        hr = big[5:35, 5:35]
        sr = big[5 + u:35 + u, 5 + v:35 + v]
        score = evaluate_with_shift_search(hr, sr)
        assert score.cpsnr == 100.0
        assert score.offset == (3 + u, 3 + v)
        assert score.candidates == 49

    def test_first_maximum_wins(self):
        hr = np.full((20, 20), 0.5)
        score = evaluate_with_shift_search(hr, hr)
        assert score.offset == (0, 0) and score.cpsnr == 100.0

    def test_unscored_without_clear_pixels(self):
        hr = textured(10, (20, 20))
        sm = np.zeros_like(hr)
        sm[:3, :3] = 1
        score = evaluate_with_shift_search(hr, hr, sm)
        assert not score.scored and score.cpsnr is None

    def test_crop_size(self):
        hr = textured(11, (384, 384))
        sr = hr + np.random.default_rng(0).normal(0, 0.01, hr.shape)
        score = evaluate_with_shift_search(hr, sr)
        assert score.clear_pixels == 378 * 378


class TestReport:
    def test_jsonl_and_means(self, tmp_path):
        hr = textured(12, (20, 20))
        rep = EvalReport([evaluate_with_shift_search(hr, hr, scene_id="a"),
                          evaluate_with_shift_search(hr, hr + 0.01 * textured(13, (20, 20)), scene_id="b")])
        path = tmp_path / "r.jsonl"
        rep.write_jsonl(path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2 and '"scene_id": "a"' in lines[0]
        assert rep.mean_cpsnr < 100.0
        assert "mean" in rep.table()


class TestBaseline:
    def test_bicubic_of_constant(self):
        up = bicubic_upsample(np.full((4, 5), 0.25), 3)
        assert up.shape == (12, 15) and np.allclose(up, 0.25, atol=1e-6)

    def test_mean_of_stack(self):
        lrs = [np.full((4, 4), 0.2), np.full((4, 4), 0.4)]
        assert np.allclose(mean_bicubic_baseline(lrs, 2), 0.3, atol=1e-6)


class TestMetricProperties:
    def test_cssim_window_locality(self):
        hr = textured(20, (40, 40))
        sr = hr + np.random.default_rng(0).normal(0, 0.05, hr.shape)
        mask = np.zeros(hr.shape)
        mask[:10, :10] = 1
        far = sr.copy()
        far[25:, 25:] = 0.0   # beyond 11x11 window reach of the clear block
        assert cssim(hr, far, mask) == cssim(hr, sr, mask)

    def test_random_sr_below_perfect(self):
        hr = textured(21)
        assert cssim(hr, textured(22)) < cssim(hr, hr)

    @pytest.mark.parametrize("seed", range(5))
    def test_best_offset_at_least_zero_offset(self, seed):
        hr, sr = textured(seed, (24, 24)), textured(seed + 50, (24, 24))
        best = evaluate_with_shift_search(hr, sr).cpsnr
        assert best >= cpsnr(hr[3:21, 3:21], sr[3:21, 3:21])
