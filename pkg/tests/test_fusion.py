import numpy as np
import pytest

from sweepnet import fusion as F
from sweepnet import synth
from sweepnet.geometry import Camera

from conftest import covisible_masks


@pytest.fixture(scope="module")
def five_views():
    rec = synth.make_scene(0, 2, 5, synth.RigParams())
    depths = [r.depth for r in rec.renderings]
    images = [r.image for r in rec.renderings]
    return rec, depths, rec.cameras, images


def translated_pair(depth=50.0, width=32, height=24):
    K = np.array([[40.0, 0, (width - 1) / 2], [0, 40.0, (height - 1) / 2], [0, 0, 1.0]])
    a = Camera(K, np.eye(3), np.zeros(3), width, height)
    b = Camera(K, np.eye(3), np.array([-2.0, 0.0, 0.0]), width, height)
    return a, b


class TestPhotometric:
    def test_threshold_example(self):
        depth = np.ones((1, 2))
        prob = np.array([[0.31, 0.29]])
        np.testing.assert_array_equal(F.photometric_filter(depth, prob, 0.3), [[True, False]])

    def test_zero_threshold_is_validity(self, rng):
        depth = rng.uniform(-1, 1, size=(5, 5))
        np.testing.assert_array_equal(F.photometric_filter(depth, rng.random((5, 5)), 0.0), depth > 0)

    def test_monotone_in_threshold(self, rng):
        depth = rng.uniform(1, 2, size=(20, 20))
        prob = rng.random((20, 20))
        kept = [F.photometric_filter(depth, prob, t).mean() for t in np.linspace(0, 1, 21)]
        assert all(a >= b for a, b in zip(kept, kept[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            F.photometric_filter(np.ones((2, 2)), np.ones((2, 3)))


class TestSampleDepth:
    def test_bilinear_on_smooth_surface(self):
        depth = np.array([[10.0, 10.5], [10.2, 10.7]])
        out = F.sample_depth(depth, np.array([[0.5, 0.5]]), np.array([10.0]))
        assert out[0] == pytest.approx(10.35)

    def test_picks_nearest_across_edge(self):
        depth = np.array([[10.0, 50.0], [10.0, 50.0]])
        out = F.sample_depth(depth, np.array([[0.5, 0.5], [0.5, 0.5]]), np.array([49.0, 11.0]))
        np.testing.assert_array_equal(out, [50.0, 10.0])

    def test_outside_and_invalid(self):
        depth = np.array([[0.0, 0.0], [0.0, 3.0]])
        out = F.sample_depth(depth, np.array([[5.0, 0.0], [0.2, 0.2], [0.9, 0.9]]), np.array([3.0, 3.0, 3.0]))
        np.testing.assert_array_equal(out, [0.0, 3.0, 3.0])


class TestGeometricFilter:
    def test_min_views_one_is_validity(self, five_views):
        _, depths, cams, _ = five_views
        masks = F.geometric_filter(depths, cams, min_views=1)
        for m, d in zip(masks, depths):
            np.testing.assert_array_equal(m, d > 0)

    def test_exact_depths_keep_covisible_pixels(self, five_views):
        rec, depths, cams, _ = five_views
        masks = F.geometric_filter(depths, cams)
        covis = covisible_masks(rec)
        kept = sum((m & c).sum() for m, c in zip(masks, covis)) / sum(c.sum() for c in covis)
        assert kept >= 0.99

    def test_scaled_view_is_rejected(self, five_views):
        _, depths, cams, _ = five_views
        bad = list(depths)
        bad[2] = depths[2] * 1.1
        masks = F.geometric_filter(bad, cams)
        assert masks[2].sum() <= 0.01 * (bad[2] > 0).sum()

    def test_anti_monotone(self, five_views):
        _, depths, cams, _ = five_views
        noisy = [d * (1 + 0.01 * np.random.default_rng(k).normal(size=d.shape)) for k, d in enumerate(depths)]
        loose = F.geometric_filter(noisy, cams, min_views=2, px_tol=2.0, rel_depth_tol=0.03)
        strict = F.geometric_filter(noisy, cams, min_views=3, px_tol=1.0, rel_depth_tol=0.01)
        stricter = F.geometric_filter(noisy, cams, min_views=4, px_tol=0.5, rel_depth_tol=0.005)
        for a, b, c in zip(loose, strict, stricter):
            assert not np.any(b & ~a)
            assert not np.any(c & ~b)
        assert sum(m.sum() for m in strict) < sum(m.sum() for m in loose)

    def test_masks_remove_supporters(self, five_views):
        _, depths, cams, _ = five_views
        none = [np.zeros(d.shape, dtype=bool) for d in depths]
        none[0] = depths[0] > 0
        masks = F.geometric_filter(depths, cams, masks=none)
        assert not any(m.any() for m in masks)

    def test_input_validation(self, five_views):
        _, depths, cams, _ = five_views
        with pytest.raises(ValueError):
            F.geometric_filter(depths, cams[:3])
        with pytest.raises(ValueError):
            F.geometric_filter(depths, cams, min_views=0)


class TestFuse:
    def test_single_view_backprojects(self, five_views):
        _, depths, cams, images = five_views
        d = depths[0]
        cloud = F.fuse([d], [d > 0], [cams[0]], [images[0]], min_views=1)
        dcam = F.depth_camera(cams[0], d.shape)
        expected = dcam.backproject(dcam.pixel_grid()[d > 0], d[d > 0])
        np.testing.assert_allclose(cloud.points, expected, atol=1e-9)
        assert np.all(cloud.support == 1)

    def test_two_view_mean(self):
        a, b = translated_pair()
        d, e = 50.0, 0.05
        da = np.full((24, 32), d)
        db = np.full((24, 32), d + e)
        img = np.full((24, 32, 3), 0.5)
        cloud = F.fuse([da, db], [da > 0, db > 0], [a, b], [img, img], min_views=2)
        assert len(cloud) > 0
        # points are emitted by view 0 at the mean of its depth and view 1's
        z = cloud.points[:, 2]
        np.testing.assert_allclose(z, d + e / 2, rtol=1e-12)
        assert np.all(cloud.support == 2)

    def test_two_views_cannot_reach_three(self):
        a, b = translated_pair()
        d = np.full((24, 32), 50.0)
        img = np.zeros((24, 32, 3))
        cloud = F.fuse([d, d], [d > 0, d > 0], [a, b], [img, img], min_views=3)
        assert len(cloud) == 0 and cloud.points.shape == (0, 3)

    def test_support_and_determinism(self, five_views):
        _, depths, cams, images = five_views
        masks = F.geometric_filter(depths, cams)
        one = F.fuse(depths, masks, cams, images)
        two = F.fuse(depths, masks, cams, images)
        np.testing.assert_array_equal(one.points, two.points)
        np.testing.assert_array_equal(one.colors, two.colors)
        assert np.all(one.support >= 3)
        assert one.colors.dtype == np.uint8

    def test_no_duplicate_points(self, five_views):
        _, depths, cams, images = five_views
        cloud = F.fuse(depths, F.geometric_filter(depths, cams), cams, images)
        pts = cloud.points
        order = np.lexsort(pts.T)
        gaps = np.linalg.norm(np.diff(pts[order], axis=0), axis=1)
        assert gaps.min() > 1e-6

    def test_length_mismatch(self, five_views):
        _, depths, cams, images = five_views
        with pytest.raises(ValueError):
            F.fuse(depths, [d > 0 for d in depths], cams, images[:2])
