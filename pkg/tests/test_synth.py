import numpy as np
import pytest

from sweepnet import geometry as G
from sweepnet import synth


def fronto_scene(cam, depth, freq, seed=3):
    patch = synth.PlanarPatch(cam.center + depth * cam.principal_axis, cam.R[0], cam.R[1], 500.0, 500.0, seed)
    return synth.SceneSpec([patch], G.DepthRange(60.0, 160.0, 16), freq)


@pytest.fixture(scope="module")
def rig():
    return synth.make_rig(synth.RigParams(), 3, np.random.default_rng(5))


class TestRender:
    def test_fronto_parallel_plane_identity_pose(self):
        K = np.array([[80.0, 0, 31.5], [0, 80.0, 23.5], [0, 0, 1]])
        cam = G.Camera(K, np.eye(3), np.zeros(3), 64, 48)
        rend = synth.render(fronto_scene(cam, 90.0, 0.1), cam)
        assert rend.valid.all()
        np.testing.assert_allclose(rend.depth, 90.0, rtol=1e-14)
        assert rend.image.shape == (48, 64, 3) and rend.depth.shape == (12, 16)

    def test_background_is_invalid(self):
        K = np.array([[80.0, 0, 31.5], [0, 80.0, 23.5], [0, 0, 1]])
        cam = G.Camera(K, np.eye(3), np.zeros(3), 64, 48)
        patch = synth.PlanarPatch(np.array([0.0, 0.0, 90.0]), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), 10.0, 10.0, 1)
        rend = synth.render(synth.SceneSpec([patch], G.DepthRange(60.0, 160.0, 16), 0.1, background=0.25), cam)
        assert rend.valid.any() and not rend.valid.all()
        assert np.all(rend.depth[~rend.valid] == 0.0)
        assert np.all(rend.image[0, 0] == 0.25)

    def test_deterministic(self, scene):
        a = synth.render(scene.spec, scene.cameras[0], 0)
        b = synth.render(scene.spec, scene.cameras[0], 0)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.depth, b.depth)

    def test_depth_sampled_at_feature_centers(self, scene):
        cam = scene.cameras[2]
        rend = scene.renderings[2]
        uv = cam.scaled(4).pixel_grid() * 4 + 1.5
        d, owner = synth.ray_depth(scene.spec, cam, uv)
        np.testing.assert_array_equal(rend.depth, np.where(owner >= 0, d, 0.0))

    def test_noise_is_seeded_per_view(self):
        rec = synth.make_scene(0, 0, 2, synth.RigParams(), noise_sigma=0.05)
        clean = synth.shade(rec.spec, rec.cameras[0], rec.cameras[0].pixel_grid())
        resid = rec.renderings[0].image - clean
        assert 0.04 < resid.std() < 0.06
        again = synth.render(rec.spec, rec.cameras[0], 0).image
        np.testing.assert_array_equal(again, rec.renderings[0].image)
        other = synth.render(rec.spec, rec.cameras[0], 1).image
        assert np.any(other != again)

    def test_texture_range(self):
        tex = synth.Texture(4, 0.1)
        vals = tex(np.random.default_rng(0).uniform(-500, 500, size=(1000, 2)))
        assert np.all((vals > 0) & (vals < 1))


class TestConsistency:
    @pytest.mark.parametrize("a,b", [(0, 1), (1, 3), (4, 2)])
    def test_cross_view_depths_agree(self, scene, a, b):
        """Back-project A's ground truth into B: visible points hit B's surface at the same depth."""
        ca, cb = scene.cameras[a], scene.cameras[b]
        fa = ca.scaled(4)
        ra = scene.renderings[a]
        X = fa.backproject(fa.pixel_grid()[ra.valid], ra.depth[ra.valid])
        uv, z = cb.project(X)
        hit, owner = synth.ray_depth(scene.spec, cb, uv)
        inside = (uv[:, 0] >= 0) & (uv[:, 0] <= cb.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= cb.height - 1)
        # nothing in B can lie behind a surface point it sees
        assert np.all(hit[inside] <= z[inside] * (1 + 1e-9))
        agree = inside & (np.abs(hit - z) <= 1e-9 * z)
        occluded = inside & (hit < z * (1 - 1e-9))
        assert np.all(agree | occluded | ~inside)
        assert agree.sum() > 0.5 * inside.sum()

    def test_single_plane_all_agree(self, rig):
        scene = fronto_scene(rig[1], 100.0, 0.1)
        r1 = synth.render(scene, rig[1])
        f1 = rig[1].scaled(4)
        X = f1.backproject(f1.pixel_grid(), r1.depth)
        uv, z = rig[0].project(X)
        hit, _ = synth.ray_depth(scene, rig[0], uv)
        np.testing.assert_allclose(hit, z, rtol=1e-9)

    def test_images_related_by_homography(self, rig):
        """Warping the source rendering by the plane homography reproduces the reference.

        Bilinear resampling is accurate to 1e-3 once the image-space texture
        frequency is low (here at most 0.02 cycles per pixel).
        """
        ref, src = rig[1], rig[0]
        for depth in (70.0, 100.0, 150.0):
            scene = fronto_scene(ref, depth, 0.02 * 80.0 / 160.0)
            a = synth.render(scene, ref).image
            b = synth.render(scene, src).image
            warped, valid = G.warp_map(b, G.plane_sweep_homography(ref, src, depth))
            assert valid.mean() > 0.5
            assert np.abs(warped - a)[valid].max() < 1e-3

    def test_homography_error_shrinks_with_bandwidth(self, rig):
        ref, src = rig[1], rig[0]
        errors = []
        for freq in (0.2, 0.1, 0.05):
            scene = fronto_scene(ref, 100.0, freq * 80.0 / 160.0)
            warped, valid = G.warp_map(synth.render(scene, src).image, G.plane_sweep_homography(ref, src, 100.0))
            errors.append(np.abs(warped - synth.render(scene, ref).image)[valid].mean())
        assert errors[0] > errors[1] > errors[2]


class TestDataset:
    def test_reproducible(self):
        a = synth.make_dataset(3, 2, 3)
        b = synth.make_dataset(3, 2, 3)
        for ra, rb in zip(a.scenes, b.scenes):
            for x, y in zip(ra.renderings, rb.renderings):
                np.testing.assert_array_equal(x.image, y.image)
                np.testing.assert_array_equal(x.depth, y.depth)

    def test_depths_inside_range_and_patches_face_cameras(self, toy_dataset):
        for rec in toy_dataset.scenes:
            r = rec.spec.depth_range
            for rend in rec.renderings:
                d = rend.depth[rend.valid]
                assert d.min() >= r.d_min and d.max() <= r.d_max
            for patch in rec.spec.patches:
                for cam in rec.cameras:
                    assert np.dot(patch.normal, cam.center - patch.origin) > 0

    def test_split(self, toy_dataset):
        assert set(toy_dataset.train_ids).isdisjoint(toy_dataset.val_ids)
        assert sorted(toy_dataset.train_ids + toy_dataset.val_ids) == list(range(5))
        assert toy_dataset.val_ids == [4]
        assert synth.split_ids(10) == (list(range(8)), [8, 9])
        assert synth.split_ids(1) == ([0], [])

    def test_needs_a_scene(self):
        with pytest.raises(ValueError):
            synth.make_dataset(0, 0, 3)

    def test_sparse_cloud(self, scene):
        cloud = synth.sparse_cloud(scene)
        cloud.validate(len(scene.cameras))
        assert len(cloud.points) > 0
        assert all(len(v) >= 1 for v in cloud.visibility)

    def test_manifest_round_trip(self, tmp_path):
        ds = synth.make_dataset(1, 2, 3, noise_sigma=0.02)
        synth.write_manifest(ds, tmp_path / "manifest.txt")
        back = synth.read_manifest(tmp_path / "manifest.txt")
        assert back.train_ids == ds.train_ids and back.val_ids == ds.val_ids and back.params == ds.params
        for ra, rb in zip(ds.scenes, back.scenes):
            for x, y in zip(ra.renderings, rb.renderings):
                np.testing.assert_array_equal(x.image, y.image)
                np.testing.assert_array_equal(x.depth, y.depth)

    @pytest.mark.parametrize("text", ["", "hello 1\n", "sweepnet-manifest 9\n", "sweepnet-manifest 1\nseed 0\n"])
    def test_bad_manifest(self, tmp_path, text):
        (tmp_path / "m.txt").write_text(text)
        with pytest.raises(ValueError):
            synth.read_manifest(tmp_path / "m.txt")
