import numpy as np
import pytest

from diffdepth import geometry as G
from diffdepth import losses as L
from diffdepth.geometry import CameraIntrinsics, GeometryError, Pose
from diffdepth.tensor import Tensor, grad_check


@pytest.fixture
def K():
    return CameraIntrinsics(fx=20.0, fy=22.0, cx=7.5, cy=5.5, width=16, height=12)


def textured(rng, h, w, channels=3):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = 0.5 + 0.25 * np.sin(0.9 * xx + 0.3 * yy) + 0.15 * np.cos(0.5 * yy - 0.7 * xx)
    return np.stack([base * (0.8 + 0.1 * c) for c in range(channels)]) + 0.01 * rng.normal(size=(channels, h, w))


class TestIntrinsicsAndPose:
    def test_rejects_nonpositive_focal(self):
        with pytest.raises(GeometryError):
            CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)

    def test_rejects_principal_point_outside(self):
        with pytest.raises(GeometryError):
            CameraIntrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)

    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(GeometryError):
            Pose(np.diag([1.0, 1.0, 2.0]), np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(GeometryError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_rotation_is_orthonormal(self):
        r = G.rotation_matrix(0.3, -0.2, 0.7)
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)

    def test_inverse_composes_to_identity(self):
        p = Pose.from_euler(0.1, 0.2, -0.3, [0.5, -0.1, 0.2])
        q = p.compose(p.inverse())
        np.testing.assert_allclose(q.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(q.translation, 0.0, atol=1e-12)

    def test_dict_round_trip(self, K):
        p = Pose.from_euler(0.1, 0.0, 0.05, [1.0, 2.0, 3.0])
        q = Pose.from_dict(p.to_dict())
        np.testing.assert_array_equal(p.rotation, q.rotation)
        assert CameraIntrinsics.from_dict(K.to_dict()) == K


class TestBackproject:
    def test_principal_ray_unit_depth(self):
        K2 = CameraIntrinsics(20.0, 20.0, 7.0, 5.0, 16, 12)
        pts = G.backproject(Tensor(np.ones((1, 12, 16))), K2).data
        np.testing.assert_allclose(pts[:, 5, 7], [0.0, 0.0, 1.0], atol=1e-15)

    def test_similar_triangles(self):
        K2 = CameraIntrinsics(4.0, 4.0, 3.0, 2.0, 8, 6)
        z = 2.5
        pts = G.backproject(Tensor(np.full((1, 6, 8), z)), K2).data
        # pixel (cx + fx, cy) = (7, 2)
        np.testing.assert_allclose(pts[:, 2, 7], [z, 0.0, z], atol=1e-12)

    def test_project_backproject_round_trip(self, K, rng):
        depth = rng.uniform(0.5, 8.0, size=(1, 12, 16))
        coords, valid = G.project(G.backproject(Tensor(depth), K), Pose.identity(), K)
        u, v = G.pixel_grid(12, 16)
        assert np.max(np.abs(coords.data[0] - u)) < 1e-6
        assert np.max(np.abs(coords.data[1] - v)) < 1e-6
        assert valid.all()

    def test_strict_mode_rejects_nonpositive_depth(self, K):
        depth = np.ones((1, 12, 16))
        depth[0, 3, 3] = 0.0
        with pytest.raises(GeometryError):
            G.backproject(Tensor(depth), K, strict=True)

    def test_lenient_mode_clamps_to_epsilon(self, K):
        depth = np.ones((1, 12, 16))
        depth[0, 3, 3] = -1.0
        pts = G.backproject(Tensor(depth), K).data
        assert pts[2, 3, 3] == G.DEPTH_EPS


class TestProject:
    def test_identity_pose_keeps_grid(self, K):
        coords, _ = G.project(G.backproject(Tensor(np.full((1, 12, 16), 3.0)), K), Pose.identity(), K)
        u, v = G.pixel_grid(12, 16)
        np.testing.assert_allclose(coords.data[0], u, atol=1e-12)
        np.testing.assert_allclose(coords.data[1], v, atol=1e-12)

    @pytest.mark.parametrize("tx,z", [(0.2, 4.0), (-0.5, 2.0), (0.05, 9.0)])
    def test_plane_translation_disparity(self, K, tx, z):
        pts = G.backproject(Tensor(np.full((1, 12, 16), z)), K)
        coords, _ = G.project(pts, Pose(np.eye(3), [tx, 0.0, 0.0]), K)
        u, v = G.pixel_grid(12, 16)
        shift = coords.data[0] - u
        assert np.max(np.abs(shift - K.fx * tx / z)) < 0.1
        np.testing.assert_allclose(coords.data[1], v, atol=1e-12)

    def test_points_behind_camera_are_masked(self, K):
        pts = G.backproject(Tensor(np.full((1, 12, 16), 1.0)), K)
        _, valid = G.project(pts, Pose(np.eye(3), [0.0, 0.0, -2.0]), K)
        assert not valid.any()

    def test_batched_poses(self, K):
        pts = G.backproject(Tensor(np.full((2, 1, 12, 16), 4.0)), K)
        coords, valid = G.project(pts, [Pose.identity(), Pose(np.eye(3), [0.4, 0, 0])], K)
        assert coords.shape == (2, 2, 12, 16) and valid.shape == (2, 1, 12, 16)
        np.testing.assert_allclose(coords.data[1, 0] - coords.data[0, 0], K.fx * 0.4 / 4.0, atol=1e-12)

    def test_pose_count_mismatch(self, K):
        pts = G.backproject(Tensor(np.ones((2, 1, 12, 16))), K)
        with pytest.raises(GeometryError):
            G.project(pts, [Pose.identity()] * 3, K)


class TestBilinearWarp:
    def test_integer_identity_grid_is_exact(self, rng):
        src = rng.normal(size=(3, 5, 7))
        u, v = G.pixel_grid(5, 7)
        out, mask = G.bilinear_warp(Tensor(src), Tensor(np.stack([u, v])))
        np.testing.assert_array_equal(out.data, src)
        assert mask.all()

    def test_half_pixel_shift_on_ramp_gives_midpoints(self):
        ramp = np.tile(np.arange(6.0), (4, 1))[None]
        u, v = G.pixel_grid(4, 6)
        out, mask = G.bilinear_warp(Tensor(ramp), Tensor(np.stack([u + 0.5, v])))
        np.testing.assert_allclose(out.data[0, :, :5], ramp[0, :, :5] + 0.5, atol=1e-15)
        assert mask[0, :, :5].all() and not mask[0, :, 5].any()

    def test_out_of_bounds_gives_zero_and_mask_zero(self, rng):
        src = rng.normal(size=(2, 4, 4)) + 5.0
        u, v = G.pixel_grid(4, 4)
        out, mask = G.bilinear_warp(Tensor(src), Tensor(np.stack([u + 100.0, v - 50.0])))
        np.testing.assert_array_equal(out.data, 0.0)
        np.testing.assert_array_equal(mask, 0.0)

    def test_rejects_bad_coord_channels(self, rng):
        with pytest.raises(ValueError):
            G.bilinear_warp(Tensor(rng.normal(size=(1, 4, 4))), Tensor(np.zeros((3, 4, 4))))


class TestSynthesizeView:
    def test_identity_pose_returns_aux_image(self, K, rng):
        img = rng.uniform(size=(3, 12, 16))
        out, mask = G.synthesize_view(Tensor(img), Tensor(rng.uniform(1, 5, size=(1, 12, 16))), Pose.identity(), K)
        np.testing.assert_allclose(out.data, img, atol=1e-12)
        assert mask.all()

    def test_integer_shift_on_plane(self, rng):
        K2 = CameraIntrinsics(10.0, 10.0, 7.5, 5.5, 16, 12)
        z, tx = 5.0, 1.0  # fx * tx / z = 2 px
        aux = rng.uniform(size=(3, 12, 16))
        out, mask = G.synthesize_view(Tensor(aux), Tensor(np.full((1, 12, 16), z)), Pose(np.eye(3), [tx, 0, 0]), K2)
        np.testing.assert_allclose(out.data[:, :, :14], aux[:, :, 2:], atol=1e-12)
        assert mask[0, :, :14].all() and not mask[0, :, 14:].any()

    def test_identity_pose_ignores_which_depth(self, K, rng):
        aux = rng.uniform(size=(3, 12, 16))
        a, _ = G.synthesize_view(Tensor(aux), Tensor(np.full((1, 12, 16), 2.0)), Pose.identity(), K)
        b, _ = G.synthesize_view(Tensor(aux), Tensor(rng.uniform(0.5, 9, size=(1, 12, 16))), Pose.identity(), K)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_identity_pose_photometric_loss_is_zero(self, K, rng):
        img = rng.uniform(size=(1, 3, 12, 16))
        warped, mask = G.synthesize_view(Tensor(img), Tensor(rng.uniform(1, 4, size=(1, 1, 12, 16))), Pose.identity(), K)
        loss = L.photometric_loss(Tensor(img), [(warped, mask)])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_mask_is_monotone_in_image_bounds(self, rng):
        small = CameraIntrinsics(10.0, 10.0, 7.5, 5.5, 16, 12)
        depth = rng.uniform(2, 6, size=(1, 12, 16))
        pose = Pose.from_euler(0.0, 0.05, 0.0, [0.6, 0.1, 0.2])
        coords, front = G.project(G.backproject(Tensor(depth), small), pose, small)
        _, m_small = G.bilinear_warp(Tensor(np.zeros((1, 12, 16))), coords)
        _, m_big = G.bilinear_warp(Tensor(np.zeros((1, 40, 48))), coords)
        assert np.all(m_big >= m_small)

    def test_gradient_wrt_depth_through_full_chain(self, K):
        worst = 0.0
        for seed in range(20):
            r = np.random.default_rng(seed)
            aux = Tensor(textured(r, 12, 16))
            target = Tensor(textured(r, 12, 16))
            pose = Pose.from_euler(0.0, 0.02, 0.0, [0.3, 0.05, 0.1])

            def f(depth):
                out, mask = G.synthesize_view(aux, depth, pose, K)
                return L.photometric_loss(target[None], [(out[None], mask[None])])

            depth = Tensor(r.uniform(2.0, 6.0, size=(1, 12, 16)))
            rep = grad_check(f, [depth], tol=1e-3, rng=r)
            worst = max(worst, rep.max_rel_error)
        assert worst < 1e-3, worst
