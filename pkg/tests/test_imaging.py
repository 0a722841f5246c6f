import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lesionfuse import imaging as im
from lesionfuse.errors import ConfigError, FormatError, ShapeError

rng = np.random.default_rng(0)


def gray_ramp(n=8):
    v = np.arange(n * n, dtype=np.float64).reshape(n, n) / (n * n - 1)
    return np.repeat(v[..., None], 3, axis=2)


def global_equalization_oracle(levels: np.ndarray) -> np.ndarray:
    """Each pixel maps to the fraction of pixels at or below its level."""
    flat = levels.ravel()
    out = np.array([(flat <= v).sum() / flat.size for v in flat])
    return out.reshape(levels.shape)


class TestIO:
    def test_png_round_trip(self, tmp_path):
        img = im.from_uint8(rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8))
        im.save_image(img, tmp_path / "a.png")
        np.testing.assert_array_equal(im.load_image(tmp_path / "a.png"), img)

    def test_ppm_round_trip(self, tmp_path):
        img = im.from_uint8(rng.integers(0, 256, size=(4, 6, 3), dtype=np.uint8))
        im.save_image(img, tmp_path / "a.ppm")
        assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6")
        np.testing.assert_array_equal(im.load_image(tmp_path / "a.ppm"), img)

    def test_black_pixel(self, tmp_path):
        im.save_image(np.zeros((1, 1, 3)), tmp_path / "b.png")
        out = im.load_image(tmp_path / "b.png")
        assert out.shape == (1, 1, 3) and not out.any()

    def test_truncated(self, tmp_path):
        im.save_image(rng.random((16, 16, 3)), tmp_path / "t.png")
        raw = (tmp_path / "t.png").read_bytes()
        (tmp_path / "t.png").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            im.load_image(tmp_path / "t.png")

    def test_not_an_image(self, tmp_path):
        (tmp_path / "x.png").write_text("hello")
        with pytest.raises(FormatError):
            im.load_image(tmp_path / "x.png")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            im.load_image(tmp_path / "nope.png")

    def test_save_needs_parent(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            im.save_image(np.zeros((2, 2, 3)), tmp_path / "no" / "x.png")

    def test_unsupported_suffix(self, tmp_path):
        with pytest.raises(FormatError):
            im.save_image(np.zeros((2, 2, 3)), tmp_path / "x.jpg")


class TestShadesOfGray:
    def test_gray_unchanged(self):
        img = np.full((5, 5, 3), 0.4)
        np.testing.assert_allclose(im.shades_of_gray(img), img, atol=1e-6)

    def test_doubled_red_equalised(self):
        base = rng.uniform(0.05, 0.45, size=(6, 6))
        img = np.stack([2 * base, base, base], axis=-1)
        out = im.shades_of_gray(img, p=6).astype(np.float64)
        norms = [np.mean(out[..., c] ** 6) ** (1 / 6) for c in range(3)]
        assert max(norms) - min(norms) < 1e-6

    def test_large_p_is_white_patch(self):
        img = np.full((10, 10, 3), 0.2)
        img[..., 0] *= 0.5
        img[3, 4] = [0.45, 0.9, 0.6]      # sparse highlight dominates the p-norm
        out = im.shades_of_gray(img, p=64).astype(np.float64)
        maxes = img.reshape(-1, 3).max(axis=0)
        ref = np.clip(img * (maxes.mean() / maxes), 0, 1)
        np.testing.assert_allclose(out, ref, atol=0.02)

    def test_zero_channel_left_alone(self):
        img = rng.random((4, 4, 3)) * 0.5
        img[..., 2] = 0
        out = im.shades_of_gray(img)
        assert not out[..., 2].any()

    def test_p_below_one(self):
        with pytest.raises(ConfigError):
            im.shades_of_gray(np.ones((2, 2, 3)) * 0.5, p=0.5)


class TestCLAHE:
    @pytest.mark.parametrize("value", [0.0, 0.3, 1.0])
    def test_constant_unchanged(self, value):
        img = np.full((16, 16, 3), value)
        np.testing.assert_allclose(im.clahe(img), img, atol=1 / 255)

    def test_global_equalization_oracle(self):
        img = gray_ramp(8)
        out = im.clahe(img, clip_limit=math.inf, tiles=1)
        levels = np.rint(img[..., 0] * 255).astype(int)
        ref = global_equalization_oracle(levels)
        for c in range(3):
            assert np.abs(out[..., c] - ref).max() <= 1 / 255

    def test_per_channel_oracle(self):
        img = rng.random((8, 8, 3))
        out = im.clahe(img, clip_limit=math.inf, tiles=1, per_channel=True)
        for c in range(3):
            ref = global_equalization_oracle(np.rint(img[..., c] * 255).astype(int))
            assert np.abs(out[..., c] - ref).max() <= 1 / 255

    def test_clipping_limits_contrast_gain(self):
        img = np.full((32, 32, 3), 0.5)
        img[:, :16] = 0.45
        strong = im.clahe(img, clip_limit=math.inf, tiles=1)
        mild = im.clahe(img, clip_limit=1.0, tiles=1)
        spread = lambda x: x[..., 0].max() - x[..., 0].min()  # noqa: E731
        assert spread(mild) < spread(strong)

    def test_range_on_random_images(self):
        r = np.random.default_rng(11)
        for _ in range(1000):
            img = r.random((int(r.integers(1, 12)), int(r.integers(1, 12)), 3))
            out = im.clahe(img, clip_limit=float(r.uniform(1, 4)), tiles=int(r.integers(1, 4)))
            assert out.min() >= 0 and out.max() <= 1

    def test_bad_arguments(self):
        with pytest.raises(ConfigError):
            im.clahe(np.zeros((4, 4, 3)), clip_limit=0.5)
        with pytest.raises(ConfigError):
            im.clahe(np.zeros((4, 4, 3)), tiles=0)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (6, 7, 3), elements=st.floats(0, 1)))
    def test_luma_chroma_inverse(self, img):
        back = im.luma_chroma_to_rgb(*im.rgb_to_luma_chroma(img))
        np.testing.assert_allclose(back, img, atol=1e-12)


class TestResize:
    def test_identity(self):
        img = rng.random((5, 7, 3)).astype(np.float32)
        np.testing.assert_array_equal(im.resize_bilinear(img, 5, 7), img)

    def test_hand_case(self):
        out = im.resize_bilinear(np.array([[0.0, 4.0], [8.0, 12.0]]), 4, 4)
        np.testing.assert_array_equal(out, [[0, 1, 3, 4], [2, 3, 5, 6], [6, 7, 9, 10], [8, 9, 11, 12]])

    @pytest.mark.parametrize("fn", [im.resize_bilinear, im.resize_bicubic])
    @pytest.mark.parametrize("shape", [(1, 1), (3, 3), (9, 4)])
    def test_constant(self, fn, shape):
        img = np.full((4, 6, 3), 0.37)
        np.testing.assert_allclose(fn(img, *shape), 0.37, atol=1e-6)

    def test_bicubic_interpolates_linear_ramp_interior(self):
        # Catmull-Rom reproduces linear functions away from the clamped border
        x = np.tile(np.linspace(0.1, 0.9, 16), (4, 1))
        img = np.repeat(x[..., None], 3, axis=2)
        out = im.resize_bicubic(img, 4, 32)[..., 0]
        src = (np.arange(32) + 0.5) / 2 - 0.5
        ref = 0.1 + src * (0.8 / 15)
        np.testing.assert_allclose(out[:, 3:-3], np.tile(ref[3:-3], (4, 1)), atol=1e-6)

    def test_bad_extent(self):
        with pytest.raises(ShapeError):
            im.resize_bilinear(np.zeros((2, 2, 3)), 0, 2)


class TestSRTarget:
    def test_paper_scale(self):
        assert im.sr_target(np.zeros((224, 224, 3)), "bilinear").shape == (448, 448, 3)

    @pytest.mark.parametrize("method", ["bilinear", "bicubic"])
    def test_constant(self, method):
        np.testing.assert_allclose(im.sr_target(np.full((5, 5, 3), 0.6), method), 0.6, atol=1e-6)

    def test_bilinear_equals_resize(self):
        img = rng.random((6, 5, 3))
        np.testing.assert_array_equal(im.sr_target(img, "bilinear"), im.resize_bilinear(img, 12, 10))

    def test_file_method(self, tmp_path):
        src = tmp_path / "a.png"
        im.save_image(np.zeros((4, 4, 3)), src)
        with pytest.raises(FileNotFoundError):
            im.sr_target(np.zeros((4, 4, 3)), "file", source_path=src)
        im.save_image(np.full((8, 8, 3), 1.0), im.sr_path_for(src))
        assert im.sr_target(np.zeros((4, 4, 3)), "file", source_path=src).min() == 1.0
        im.save_image(np.zeros((6, 6, 3)), im.sr_path_for(src))
        with pytest.raises(ShapeError):
            im.sr_target(np.zeros((4, 4, 3)), "file", source_path=src)

    def test_bad_method_and_factor(self):
        with pytest.raises(ConfigError):
            im.sr_target(np.zeros((2, 2, 3)), "lanczos")
        with pytest.raises(ConfigError):
            im.sr_target(np.zeros((2, 2, 3)), "bilinear", factor=3)


class TestAugment:
    def test_disabled_is_identity(self):
        img = rng.random((9, 9, 3)).astype(np.float32)
        out = im.augment(img, im.AugmentConfig.disabled(), np.random.default_rng(1))
        np.testing.assert_array_equal(out, img)

    def test_double_hflip(self):
        img = rng.random((5, 8, 3)).astype(np.float32)
        cfg = im.AugmentConfig(1.0, 0.0, (1.0, 1.0), 0.0, 0.0, 0.0, 0.0)
        once = im.augment(img, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(once, img[:, ::-1])
        np.testing.assert_array_equal(im.augment(once, cfg, np.random.default_rng(0)), img)

    def test_deterministic(self):
        img = rng.random((12, 12, 3)).astype(np.float32)
        cfg = im.AugmentConfig()
        a = im.augment(img, cfg, np.random.default_rng([3, 1, 4]))
        b = im.augment(img, cfg, np.random.default_rng([3, 1, 4]))
        np.testing.assert_array_equal(a, b)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_range(self, seed):
        img = np.random.default_rng(seed).random((8, 8, 3))
        out = im.augment(img, im.AugmentConfig(noise_sigma=0.3, brightness=0.5), np.random.default_rng(seed))
        assert out.min() >= 0 and out.max() <= 1 and out.shape == img.shape

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            im.AugmentConfig(hflip_prob=1.5)
        with pytest.raises(ConfigError):
            im.AugmentConfig(scale_range=(1.1, 1.2))


class TestPreprocess:
    def test_output_size_and_range(self):
        out = im.preprocess(rng.random((40, 30, 3)), im.PreprocessConfig(size=24))
        assert out.shape == (24, 24, 3) and out.min() >= 0 and out.max() <= 1

    def test_stages_are_observable(self):
        img = rng.random((20, 20, 3)) * np.array([1.0, 0.7, 0.4])
        full = im.preprocess(img, im.PreprocessConfig(size=20))
        assert not np.array_equal(full, im.preprocess(img, im.PreprocessConfig(size=20, skip_clahe=True)))
        assert not np.array_equal(full, im.preprocess(img, im.PreprocessConfig(size=20, skip_color=True)))
