import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import gaussian_model
from gmdm.gmm_core import time_from_std
from gmdm.restoration import (
    PSNR_CAP,
    HqsSchedule,
    blind_denoise,
    checkerboard_sigma,
    default_noise_grid,
    denoise_with_map,
    eb_patch_average,
    estimate_noise_global,
    estimate_noise_map,
    extract_patches,
    hqs_denoise,
    hqs_update,
    psnr,
    recompose,
)


@pytest.fixture
def wiener_model():
    return gaussian_model(np.random.default_rng(2), a=9, J=8, sigma0=0.2)


def wiener_patch_average(y, sigma, model):
    # linear shrinkage per patch, then a plain loop over overlaps
    t = time_from_std(sigma)
    v = model.grid.sigma0**2 + 2 * t * model.norms_sq
    A = np.eye(model.a) - (model.K * (2 * t / v)) @ model.K.T
    acc = np.zeros_like(y)
    cnt = np.zeros_like(y)
    H, W = y.shape
    for i in range(H - 2):
        for j in range(W - 2):
            acc[i : i + 3, j : j + 3] += (A @ y[i : i + 3, j : j + 3].ravel()).reshape(3, 3)
            cnt[i : i + 3, j : j + 3] += 1
    return acc / cnt


class TestEbPatchAverage:
    def test_matches_wiener_oracle(self, wiener_model):
        y = np.random.default_rng(0).random((11, 9))
        np.testing.assert_allclose(eb_patch_average(y, 0.1, wiener_model), wiener_patch_average(y, 0.1, wiener_model),
                                   rtol=1e-10, atol=1e-12)

    def test_small_sigma_is_identity(self, small_model):
        y = np.random.default_rng(1).random((12, 12))
        np.testing.assert_allclose(eb_patch_average(y, 1e-7, small_model), y, atol=1e-9)

    def test_dc_shift_commutes(self, small_model):
        y = np.random.default_rng(2).random((10, 10)) * 0.5
        a = eb_patch_average(y + 0.3, 0.1, small_model)
        np.testing.assert_allclose(a, eb_patch_average(y, 0.1, small_model) + 0.3, atol=1e-12)

    def test_no_clipping(self, wiener_model):
        y = np.random.default_rng(3).random((8, 8)) * 3 - 1
        out = eb_patch_average(y, 0.2, wiener_model)
        assert out.min() < 0 and out.max() > 1

    def test_stride_falls_back_to_input(self, small_model):
        y = np.random.default_rng(4).random((10, 10))
        out = eb_patch_average(y, 0.1, small_model, stride=4)
        # patches start at 0 and 4 so rows and columns 7..9 are uncovered
        np.testing.assert_array_equal(out[9], y[9])
        assert not np.allclose(out[:7, :7], y[:7, :7])

    @pytest.mark.parametrize("sigma,stride", [(0.0, 1), (-0.1, 1), (0.1, 0)])
    def test_invalid(self, small_model, sigma, stride):
        with pytest.raises(ValueError):
            eb_patch_average(np.zeros((5, 5)), sigma, small_model, stride)

    def test_rejects_small_or_bad_images(self, small_model):
        for y in (np.zeros((2, 5)), np.zeros((4, 4, 3)), np.full((5, 5), np.nan)):
            with pytest.raises(ValueError):
                eb_patch_average(y, 0.1, small_model)


class TestPatches:
    def test_extract_recompose_roundtrip(self):
        y = np.random.default_rng(5).random((9, 7))
        for stride in (1, 2, 3):
            P = extract_patches(y, 3, stride)
            np.testing.assert_allclose(recompose(P, y.shape, 3, stride, fallback=y), y)

    def test_uncovered_without_fallback(self):
        y = np.zeros((8, 8))
        with pytest.raises(ValueError):
            recompose(extract_patches(y, 3, 4), y.shape, 3, 4)


class TestHqs:
    def test_update_weights(self):
        y, z = np.array([1.0]), np.array([0.0])
        # with beta = 1/sigma^2 both terms weigh one half
        assert hqs_update(y, z, 0.1, 100.0)[0] == pytest.approx(0.5)
        assert hqs_update(y, z, 0.1, 1e-12)[0] == pytest.approx(1.0)
        assert hqs_update(y, z, 0.1, 1e12)[0] == pytest.approx(0.0, abs=1e-9)

    def test_single_level_equals_averaged_eb(self, wiener_model):
        y = np.random.default_rng(6).random((10, 10)) * 0.6 + 0.2
        out = hqs_denoise(y, 0.1, wiener_model, HqsSchedule([0.1], 0.1))
        ref = np.clip(0.5 * y + 0.5 * eb_patch_average(y, 0.1, wiener_model), 0, 1)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_default_schedule(self):
        sch = HqsSchedule.default(0.1)
        assert sch.levels.size == 8
        assert sch.levels[0] == pytest.approx(0.2) and sch.levels[-1] == pytest.approx(0.025)
        np.testing.assert_allclose(sch.betas, sch.levels**-2)

    def test_output_clipped(self, wiener_model):
        y = np.random.default_rng(7).random((8, 8)) * 3 - 1
        out = hqs_denoise(y, 0.2, wiener_model)
        assert out.min() >= 0 and out.max() <= 1

    @pytest.mark.parametrize("levels,sigma", [([0.2, 0.2], 0.1), ([0.1, 0.2], 0.1), ([0.0], 0.1), ([0.1], 0.0)])
    def test_invalid_schedule(self, levels, sigma):
        with pytest.raises(ValueError):
            HqsSchedule(levels, sigma)


class TestNoiseEstimation:
    def test_zero_image_picks_smallest_level(self, wiener_model):
        grid = default_noise_grid()
        s, curve = estimate_noise_global(np.zeros((12, 12)), wiener_model)
        assert s == grid[0] and curve.shape == grid.shape
        np.testing.assert_array_equal(estimate_noise_map(np.zeros((12, 12)), wiener_model), grid[0])

    def test_offset_invariance(self, wiener_model):
        y = np.random.default_rng(8).random((14, 14)) * 0.5
        a, ca = estimate_noise_global(y, wiener_model)
        b, cb = estimate_noise_global(y + 0.4, wiener_model)
        assert a == b
        np.testing.assert_allclose(ca, cb, rtol=1e-12)

    def test_recovers_gaussian_model_noise(self):
        # patches sampled from the model itself, then corrupted at known levels
        rng = np.random.default_rng(9)
        m = gaussian_model(rng, a=9, J=8, sigma0=0.05)
        y0 = np.full((60, 60), 0.5)
        for i in range(0, 60, 3):
            for j in range(0, 60, 3):
                y0[i : i + 3, j : j + 3] = m.sample(0.0, rng, dc=0.5).reshape(3, 3)
        for sigma in (0.05, 0.1, 0.2):
            y = y0 + sigma * rng.standard_normal(y0.shape)
            s, _ = estimate_noise_global(y, m, max_patches=None)
            assert abs(s - sigma) <= 0.15 * sigma

    def test_zero_map_is_identity(self, small_model):
        y = np.random.default_rng(10).random((9, 9))
        np.testing.assert_allclose(denoise_with_map(y, np.zeros_like(y), small_model), y, rtol=0, atol=1e-15)

    def test_constant_map_matches_eb(self, small_model):
        y = np.random.default_rng(11).random((9, 9))
        np.testing.assert_allclose(denoise_with_map(y, np.full_like(y, 0.1), small_model),
                                   eb_patch_average(y, 0.1, small_model), atol=1e-12)

    def test_blind_shapes_and_validation(self, small_model):
        y = np.random.default_rng(12).random((12, 12))
        assert blind_denoise(y, small_model).shape == y.shape
        with pytest.raises(ValueError):
            estimate_noise_map(y, small_model, window=2)
        with pytest.raises(ValueError):
            estimate_noise_map(y, small_model, stride=4)
        with pytest.raises(ValueError):
            estimate_noise_global(y, small_model, s_grid=[0.1, 0.05])
        with pytest.raises(ValueError):
            denoise_with_map(y, np.zeros((3, 3)), small_model)

    def test_checkerboard(self):
        m = checkerboard_sigma((4, 6), 2)
        assert m[0, 0] == 0.1 and m[0, 2] == 0.2 and m[2, 0] == 0.2 and m[3, 3] == 0.1 and m[3, 5] == 0.2


def naive_psnr(x, ref):
    total = 0.0
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            total += (x[i, j] - ref[i, j]) ** 2
    return 10 * np.log10(x.size / total)


class TestPsnr:
    def test_known_value(self):
        assert psnr(np.full((2, 2), 0.1), np.zeros((2, 2))) == pytest.approx(20.0)

    def test_identical_is_capped(self):
        assert psnr(np.ones((3, 3)), np.ones((3, 3))) == PSNR_CAP

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.ones((2, 2)), np.ones((2, 3)))

    @given(st.integers(0, 2**32 - 1))
    def test_matches_double_loop(self, seed):
        rng = np.random.default_rng(seed)
        ref = rng.random((5, 7))
        x = ref + rng.normal(0, 0.05, ref.shape)
        assert psnr(x, ref) == pytest.approx(naive_psnr(x, ref), rel=1e-12)
