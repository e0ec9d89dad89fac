import json

import numpy as np
import pytest

from mpnerf import geometry as geo
from mpnerf import scene as sc


@pytest.fixture(scope="module")
def small():
    return sc.make_scene(3, "mixed", size=32)


def flat_scene(albedo=0.5, height=0.0):
    return sc.HeightfieldScene(
        seed=0, kind="mountain", extent=50.0,
        octaves=np.array([[height, 0.0, 1.0, 0.0, np.pi / 2]]),
        boxes=np.zeros((0, 5)), box_albedo=np.zeros((0, 3)),
        texture=np.full((8, 8, 3), albedo), sun=np.array([0.0, 0.0, 1.0]),
    )


class TestMakeScene:
    def test_deterministic(self, small):
        _, again = sc.make_scene(3, "mixed", size=32)
        assert again.manifest == small[1].manifest
        assert all(np.array_equal(a, b) for a, b in zip(again.images, small[1].images))

    def test_cameras_above_terrain(self, small):
        scene, data = small
        assert len(data) == 21
        for v in data.manifest.views:
            assert v.pose.t[2] > scene.max_height

    def test_forward_axes_hit_scene_box(self, small):
        scene, data = small
        for v in data.manifest.views:
            o, d = v.pose.t[None], v.pose.forward[None]
            t0, t1 = sc._slab_interval(o, d, scene.extent, -scene.max_height, scene.max_height)
            assert t0[0] < t1[0]

    def test_near_far_bracket_depths(self, small):
        _, data = small
        d = np.concatenate([x.ravel() for x in data.depths])
        assert data.near < d.min() and d.max() <= data.far

    def test_bad_size(self):
        with pytest.raises(sc.SceneError, match="multiple of 32"):
            sc.make_scene(0, "mixed", size=48)

    def test_bad_kind(self):
        with pytest.raises(sc.SceneError, match="kind"):
            sc.make_scene(0, "desert", size=32)


class TestRenderGt:
    def test_flat_looking_down(self):
        scene = flat_scene()
        intr = geo.Intrinsics.from_fov(16, 16, 60.0)
        pose = geo.look_at([0.0, 0.0, 10.0], [0.0, 0.0, 0.0], up=(0.0, 1.0, 0.0))
        img, depth = sc.render_gt(scene, intr, pose)
        rays = geo.cast_rays(intr, pose, geo.pixel_grid(intr))
        cos = -rays.directions[:, 2]
        np.testing.assert_allclose(depth.ravel(), 10.0 / cos, atol=1e-3)
        # uniform albedo under an overhead sun: a constant image
        np.testing.assert_allclose(img, np.broadcast_to(img[0, 0], img.shape), atol=1e-9)

    def test_center_depth_matches_plane_solution(self):
        scene = flat_scene(height=0.0)
        intr = geo.Intrinsics.from_fov(17, 17, 45.0)
        eye = np.array([3.0, -2.0, 4.0])
        pose = geo.look_at(eye, [0.5, 0.2, 0.0])
        _, depth = sc.render_gt(scene, intr, pose)
        d = geo.cast_rays(intr, pose, [[8, 8]]).directions[0]
        assert depth[8, 8] == pytest.approx(-eye[2] / d[2], abs=1e-3)

    def test_depth_unprojects_onto_surface(self):
        scene = sc.heightfield(1, "mountain")
        intr = geo.Intrinsics.from_fov(32, 32, 48.0)
        pose = sc.arc_poses(21)[4]
        _, depth = sc.render_gt(scene, intr, pose)
        rays = geo.cast_rays(intr, pose, geo.pixel_grid(intr))
        ok = np.isfinite(depth.ravel())
        pts = rays.origins[ok] + rays.directions[ok] * depth.ravel()[ok, None]
        err = np.abs(pts[:, 2] - scene.height(pts[:, 0], pts[:, 1]))
        assert err.max() < 2e-3

    def test_multiview_consistent_colours(self):
        scene = flat_scene()
        scene.texture = np.random.default_rng(0).random((32, 32, 3))
        a = geo.look_at([2.0, -3.0, 5.0], [0.0, 0.0, 0.0])
        b = geo.look_at([-3.0, -1.0, 4.0], [0.0, 0.0, 0.0])
        intr = geo.Intrinsics.from_fov(16, 16, 50.0)
        img, depth = sc.render_gt(scene, intr, a)
        rays = geo.cast_rays(intr, a, geo.pixel_grid(intr))
        pts = rays.origins + rays.directions * depth.reshape(-1, 1)
        d = pts - b.t
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t, hit = sc.intersect(scene, np.broadcast_to(b.t, d.shape), d)
        assert hit.all()
        again = scene.shade(b.t + d * t[:, None])
        np.testing.assert_allclose(again, img.reshape(-1, 3), atol=1e-6)

    def test_sky_depth_is_far(self):
        scene = flat_scene()
        intr = geo.Intrinsics.from_fov(8, 8, 40.0)
        pose = geo.look_at([0.0, 0.0, 1.0], [0.0, 2.0, 10.0])
        img, depth = sc.render_gt(scene, intr, pose, far=20.0)
        assert np.all(depth == 20.0)
        np.testing.assert_allclose(img, np.broadcast_to(sc.SKY, img.shape))


class TestIO:
    def test_roundtrip(self, small, tmp_path):
        _, data = small
        sc.save_views(tmp_path, data)
        back = sc.load_scene(tmp_path)
        assert back.manifest == data.manifest
        for a, b in zip(back.images, data.images):
            assert np.max(np.abs(a - b)) <= 1 / 255
        assert np.allclose(back.depths[0], data.depths[0], atol=1e-5)

    def test_rejects_reflection(self, small, tmp_path):
        _, data = small
        sc.save_views(tmp_path, data)
        m = json.loads((tmp_path / "manifest.json").read_text())
        c2w = np.array(m["views"][2]["c2w"]).reshape(4, 4)
        c2w[:3, 0] *= -1
        m["views"][2]["c2w"] = c2w.ravel().tolist()
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(sc.SceneError, match="view 2.*determinant"):
            sc.load_scene(tmp_path)

    def test_missing_image(self, small, tmp_path):
        _, data = small
        sc.save_views(tmp_path, data)
        (tmp_path / "view_004.png").unlink()
        with pytest.raises(sc.SceneError, match="view_004"):
            sc.load_scene(tmp_path)

    def test_dimension_mismatch(self, small, tmp_path):
        _, data = small
        sc.save_views(tmp_path, data)
        sc.write_png(tmp_path / "view_001.png", np.zeros((16, 32, 3)))
        with pytest.raises(sc.SceneError, match="32x16"):
            sc.load_scene(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(sc.SceneError, match="not found"):
            sc.load_scene(tmp_path)


class TestSplit:
    def test_three_view(self):
        train, test = sc.split_views(21, "3view")
        assert train == [0, 7, 15]
        assert len(test) == 18

    def test_five_view_disjoint(self):
        train, test = sc.split_views(21, "5view")
        assert train == [0, 7, 10, 15, 20]
        assert not set(train) & set(test)
        assert sorted(train + test) == list(range(21))

    def test_fraction(self):
        train, test = sc.split_views(21, 0.3)
        assert len(train) == 6 and len(test) == 15

    def test_guards(self):
        with pytest.raises(sc.SceneError, match="non-empty"):
            sc.split_views(21, 1.0)
        with pytest.raises(sc.SceneError, match="21 views"):
            sc.split_views(10, "3view")
        with pytest.raises(sc.SceneError, match="protocol"):
            sc.split_views(21, "7view")
