"""Gallery, augmentation, resize, and PPM round-trip tests."""

import numpy as np
import pytest

from insloc.imaging import (AugmentParams, PpmError, augment_view,
                            gaussian_blur, generate_gallery, grayscale,
                            read_ppm, resize_bilinear, write_ppm)
from insloc.rng import substream


class TestGallery:
    def test_deterministic_regeneration(self):
        a = generate_gallery(4, 64, seed=7)
        b = generate_gallery(4, 64, seed=7)
        np.testing.assert_array_equal(a.images, b.images)

    def test_distinct_instances(self):
        g = generate_gallery(6, 32, seed=1)
        for i in range(6):
            for j in range(i + 1, 6):
                d = np.sqrt(((g.images[i] - g.images[j]) ** 2).sum(axis=2)).mean()
                assert d > 0

    def test_memory_footprint(self):
        g = generate_gallery(256, 64, seed=0)
        assert g.images.shape == (256, 64, 64, 3)
        assert g.images.dtype == np.float32
        assert g.images.nbytes == 256 * 64 * 64 * 3 * 4

    def test_ids_dense_and_unique(self):
        g = generate_gallery(10, 16, seed=3)
        assert g.instance_ids == tuple(range(10))

    def test_k_too_small(self):
        with pytest.raises(ValueError, match="at least 2"):
            generate_gallery(1, 16, seed=0)

    def test_values_in_range(self):
        g = generate_gallery(8, 32, seed=5)
        assert g.images.min() >= 0.0 and g.images.max() <= 1.0

    def test_different_seeds_differ(self):
        a = generate_gallery(3, 32, seed=0)
        b = generate_gallery(3, 32, seed=1)
        assert np.abs(a.images - b.images).max() > 0


class TestResizeBilinear:
    def test_same_size_identity(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3)).astype(np.float32)
        np.testing.assert_array_equal(resize_bilinear(img, 8, 8), img)

    def test_constant_stays_constant(self):
        img = np.full((5, 7, 3), 0.37, dtype=np.float32)
        out = resize_bilinear(img, 11, 3)
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_checkerboard_2x2_to_4x4_matches_formula(self):
        img = np.zeros((2, 2, 3), dtype=np.float32)
        img[0, 1] = 1.0
        img[1, 0] = 1.0
        got = resize_bilinear(img, 4, 4)

        # independent direct evaluation of half-pixel bilinear with edge clamp
        def ref(oy, ox):
            sy = min(max((oy + 0.5) * 0.5 - 0.5, 0.0), 1.0)
            sx = min(max((ox + 0.5) * 0.5 - 0.5, 0.0), 1.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, 1), min(x0 + 1, 1)
            fy, fx = sy - y0, sx - x0
            return ((1 - fy) * (1 - fx) * img[y0, x0, 0]
                    + (1 - fy) * fx * img[y0, x1, 0]
                    + fy * (1 - fx) * img[y1, x0, 0]
                    + fy * fx * img[y1, x1, 0])

        want = np.array([[ref(y, x) for x in range(4)] for y in range(4)])
        np.testing.assert_allclose(got[:, :, 0], want, atol=1e-6)

    def test_upscale_downscale_shapes(self):
        img = np.random.default_rng(1).uniform(size=(6, 10, 3)).astype(np.float32)
        assert resize_bilinear(img, 13, 4).shape == (13, 4, 3)


class TestAugmentView:
    def _identity_params(self, **kw):
        base = dict(view_size=16, crop_area=(1.0, 1.0), crop_aspect=(1.0, 1.0),
                    brightness=0.0, contrast=0.0, saturation=0.0,
                    grayscale_prob=0.0, blur_prob=0.0, flip_prob=0.0)
        base.update(kw)
        return AugmentParams(**base)

    def test_identity_configuration(self):
        img = np.random.default_rng(2).uniform(size=(16, 16, 3)).astype(np.float32)
        p = self._identity_params()
        out = augment_view(img, p, substream(0, "aug"))
        np.testing.assert_allclose(out, resize_bilinear(img, 16, 16), atol=1e-6)

    def test_flip_involution(self):
        img = np.random.default_rng(3).uniform(size=(16, 16, 3)).astype(np.float32)
        p = self._identity_params(flip_prob=1.0)
        once = augment_view(img, p, substream(1, "a"))
        twice = augment_view(once, p, substream(2, "b"))
        np.testing.assert_allclose(twice, resize_bilinear(img, 16, 16), atol=1e-5)

    def test_grayscale_equalizes_channels(self):
        img = np.random.default_rng(4).uniform(size=(16, 16, 3)).astype(np.float32)
        p = self._identity_params(grayscale_prob=1.0)
        out = augment_view(img, p, substream(3, "c"))
        np.testing.assert_allclose(out[:, :, 0], out[:, :, 1], atol=1e-6)
        np.testing.assert_allclose(out[:, :, 1], out[:, :, 2], atol=1e-6)

    def test_output_size_and_range(self):
        img = np.random.default_rng(5).uniform(size=(40, 28, 3)).astype(np.float32)
        p = AugmentParams(view_size=24)
        rng = substream(4, "d")
        for _ in range(25):
            out = augment_view(img, p, rng)
            assert out.shape == (24, 24, 3)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_seeded_stream_replayable(self):
        img = np.random.default_rng(6).uniform(size=(32, 32, 3)).astype(np.float32)
        p = AugmentParams()
        a = [augment_view(img, p, substream(9, "e")) for _ in range(1)][0]
        b = [augment_view(img, p, substream(9, "e")) for _ in range(1)][0]
        np.testing.assert_array_equal(a, b)

    def test_bad_probability_rejected(self):
        with pytest.raises(ValueError, match="flip_prob"):
            AugmentParams(flip_prob=1.5)

    def test_empty_range_rejected(self):
        with pytest.raises(ValueError, match="crop_area"):
            AugmentParams(crop_area=(0.8, 0.2))


class TestBlur:
    def test_constant_mean_preserved(self):
        img = np.full((12, 12, 3), 0.6, dtype=np.float32)
        out = gaussian_blur(img, sigma=1.3)
        assert abs(float(out.mean()) - 0.6) < 1e-6

    def test_smooths_noise(self):
        rng = np.random.default_rng(7)
        img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
        out = gaussian_blur(img, sigma=2.0)
        assert out.std() < img.std()

    def test_grayscale_weights(self):
        img = np.zeros((2, 2, 3), dtype=np.float32)
        img[..., 0] = 1.0
        np.testing.assert_allclose(grayscale(img)[0, 0], 0.299, atol=1e-6)


class TestPpm:
    def test_round_trip_quantization_bound(self, tmp_path):
        img = np.random.default_rng(8).uniform(size=(9, 13, 3)).astype(np.float32)
        path = tmp_path / "x.ppm"
        write_ppm(img, path)
        back = read_ppm(path)
        assert np.abs(back - img).max() <= 1.0 / 510 + 1e-7

    def test_black_image_payload(self, tmp_path):
        img = np.zeros((4, 5, 3), dtype=np.float32)
        path = tmp_path / "black.ppm"
        write_ppm(img, path)
        blob = path.read_bytes()
        header = b"P6\n5 4\n255\n"
        assert blob.startswith(header)
        payload = blob[len(header):]
        assert payload == b"\x00" * (3 * 4 * 5)

    def test_header_format_exact(self, tmp_path):
        img = np.ones((2, 3, 3), dtype=np.float32)
        path = tmp_path / "h.ppm"
        write_ppm(img, path)
        assert path.read_bytes().startswith(b"P6\n3 2\n255\n")

    def test_truncated_payload_names_lengths(self, tmp_path):
        path = tmp_path / "t.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + b"\x01" * 10)
        with pytest.raises(PpmError, match=r"length 10, expected 48"):
            read_ppm(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 12)
        with pytest.raises(PpmError, match="P6"):
            read_ppm(path)

    def test_bad_maxval(self, tmp_path):
        path = tmp_path / "v.ppm"
        path.write_bytes(b"P6\n2 2\n65535\n" + b"\x00" * 12)
        with pytest.raises(PpmError, match="maxval"):
            read_ppm(path)

    def test_write_read_write_stable(self, tmp_path):
        img = np.random.default_rng(9).uniform(size=(6, 6, 3)).astype(np.float32)
        p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        write_ppm(img, p1)
        write_ppm(read_ppm(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()
