"""Copy-paste composition tests: hard-paste identity, bounds, determinism,
background-choice marginals."""

import numpy as np
import pytest

from insloc.boxes import BBox
from insloc.composition import (ComposeError, CompositeSample,
                                CompositionParams, compose, make_pair)
from insloc.imaging import AugmentParams, generate_gallery, resize_bilinear
from insloc.rng import substream


@pytest.fixture(scope="module")
def gallery():
    return generate_gallery(16, 64, seed=11)


class TestCompose:
    def test_full_cover_case(self, gallery):
        params = CompositionParams(composite_size=64, fg_scale=(64.0, 64.0),
                                   fg_aspect=(1.0, 1.0))
        fg = gallery.images[0]
        img, box = compose(fg, gallery.images[1], params, substream(0, "c"))
        assert (box.x1, box.y1, box.x2, box.y2) == (0.0, 0.0, 64.0, 64.0)
        np.testing.assert_allclose(img, resize_bilinear(fg, 64, 64), atol=1e-6)

    def test_outside_box_equals_background(self, gallery):
        params = CompositionParams()
        rng = substream(1, "c")
        for _ in range(50):
            fg = gallery.images[int(rng.integers(16))]
            bg = gallery.images[int(rng.integers(16))]
            img, box = compose(fg, bg, params, rng)
            mask = np.ones((64, 64), dtype=bool)
            mask[int(box.y1):int(box.y2), int(box.x1):int(box.x2)] = False
            assert np.abs(img[mask] - bg[mask]).sum() == 0.0

    def test_inside_box_equals_resized_foreground(self, gallery):
        params = CompositionParams()
        rng = substream(2, "c")
        fg, bg = gallery.images[0], gallery.images[1]
        img, box = compose(fg, bg, params, rng)
        h = int(box.y2 - box.y1)
        w = int(box.x2 - box.x1)
        np.testing.assert_array_equal(
            img[int(box.y1):int(box.y1) + h, int(box.x1):int(box.x1) + w],
            resize_bilinear(fg, h, w),
        )

    def test_deterministic_under_seed(self, gallery):
        params = CompositionParams()
        a_img, a_box = compose(gallery.images[2], gallery.images[5], params,
                               substream(3, "c"))
        b_img, b_box = compose(gallery.images[2], gallery.images[5], params,
                               substream(3, "c"))
        np.testing.assert_array_equal(a_img, b_img)
        assert a_box == b_box

    def test_box_always_in_bounds_and_scale_in_range(self, gallery):
        params = CompositionParams(fg_scale=(16.0, 48.0))
        rng = substream(4, "c")
        for _ in range(300):
            _, box = compose(gallery.images[0], gallery.images[1], params, rng)
            assert 0 <= box.x1 < box.x2 <= 64
            assert 0 <= box.y1 < box.y2 <= 64
            short = min(box.width, box.height)
            assert 16.0 <= short <= 48.0
            assert box.area > 0

    def test_tiny_scale_cannot_fit_raises(self, gallery):
        params = CompositionParams(fg_scale=(0.2, 0.3))
        with pytest.raises(ComposeError, match="cannot fit"):
            compose(gallery.images[0], gallery.images[1], params, substream(5, "c"))

    def test_small_background_rejected(self, gallery):
        params = CompositionParams(composite_size=64)
        small = gallery.images[0][:32, :32]
        with pytest.raises(ComposeError, match="smaller than composite"):
            compose(gallery.images[1], small, params, substream(6, "c"))

    def test_scale_max_validated_against_composite(self):
        with pytest.raises(ValueError, match="fg_scale"):
            CompositionParams(composite_size=32, fg_scale=(16.0, 64.0))


class TestCompositeSample:
    def test_bbox_bounds_enforced(self, gallery):
        with pytest.raises(ValueError, match="bounds"):
            CompositeSample(gallery.images[0], BBox(10, 10, 80, 20), 0, 1)

    def test_same_ids_rejected(self, gallery):
        with pytest.raises(ValueError, match="differ"):
            CompositeSample(gallery.images[0], BBox(0, 0, 8, 8), 3, 3)

    def test_background_sentinel_allowed(self, gallery):
        s = CompositeSample(gallery.images[0], BBox(0, 0, 64, 64), 3, -1)
        assert s.background_id == -1


class TestMakePair:
    def test_id_constraints(self, gallery):
        aug = AugmentParams()
        params = CompositionParams()
        rng = substream(7, "c")
        for _ in range(100):
            inst = int(rng.integers(16))
            q, k = make_pair(gallery, inst, aug, params, rng)
            assert q.instance_id == k.instance_id == inst
            assert q.background_id != inst
            assert k.background_id != inst
            assert q.background_id != k.background_id

    def test_gallery_too_small(self):
        tiny = generate_gallery(2, 64, seed=0)
        with pytest.raises(ValueError, match="too small"):
            make_pair(tiny, 0, AugmentParams(), CompositionParams(),
                      substream(8, "c"))

    def test_background_marginal_uniform(self):
        gal = generate_gallery(6, 64, seed=1)
        aug = AugmentParams(view_size=8)
        params = CompositionParams(fg_scale=(8.0, 16.0))
        rng = substream(9, "c")
        n = 10_000
        counts = np.zeros(6)
        for _ in range(n):
            q, _ = make_pair(gal, 0, aug, params, rng)
            counts[q.background_id] += 1
        assert counts[0] == 0
        p = 1.0 / 5
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts[1:] - n * p) <= 3 * sigma), counts

    def test_determinism(self, gallery):
        aug = AugmentParams()
        params = CompositionParams()
        q1, k1 = make_pair(gallery, 4, aug, params, substream(10, "c"))
        q2, k2 = make_pair(gallery, 4, aug, params, substream(10, "c"))
        np.testing.assert_array_equal(q1.image, q2.image)
        np.testing.assert_array_equal(k1.image, k2.image)
        assert q1.bbox == q2.bbox and k1.bbox == k2.bbox
