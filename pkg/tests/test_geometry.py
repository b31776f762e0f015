"""Unit tests for the geometric types, residuals, and error metrics."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from semigen import (
    PinholeCamera,
    GeneralizedCamera,
    Corr2D2D,
    Corr2D3D,
    HybridCorrespondences,
    PoseWithFocal,
    skew,
    intrinsic_matrix,
    ray_from_pixel,
    residual_2d2d,
    residual_2d3d,
    normalized_residual_2d2d,
    normalized_residual_2d3d,
    recover_depths,
    rotation_error_deg,
    translation_error,
    focal_rel_error,
)


def rot_z(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class TestSkew:
    def test_matches_cross_product(self):
        # cross([1,2,3], [4,5,6]) = (-3, 6, -3), worked by hand
        assert_allclose(skew([1, 2, 3]) @ [4, 5, 6], [-3.0, 6.0, -3.0])

    def test_antisymmetric(self):
        S = skew([0.3, -1.2, 2.0])
        assert_allclose(S, -S.T)
        assert_allclose(S @ [0.3, -1.2, 2.0], np.zeros(3), atol=1e-15)


class TestIntrinsics:
    def test_diagonal_form(self):
        assert_allclose(intrinsic_matrix(2.5), np.diag([2.5, 2.5, 1.0]))


class TestPinholeCamera:
    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            PinholeCamera(rotation=np.diag([1.0, 1.0, 2.0]),
                          translation=np.zeros(3), focal=1.0)

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            PinholeCamera(rotation=np.diag([1.0, 1.0, -1.0]),
                          translation=np.zeros(3), focal=1.0)

    def test_rejects_nonpositive_focal(self):
        with pytest.raises(ValueError):
            PinholeCamera(rotation=np.eye(3), translation=np.zeros(3), focal=0.0)

    def test_arrays_are_immutable(self):
        cam = PinholeCamera(rotation=np.eye(3), translation=np.zeros(3), focal=1.0)
        with pytest.raises(ValueError):
            cam.rotation[0, 0] = 2.0


class TestRayFromPixel:
    def test_identity_rig_camera(self):
        cam = PinholeCamera(rotation=np.eye(3), translation=np.zeros(3), focal=2.0)
        # K^-1 [2,4,1] = [1,2,1] for K = diag(2,2,1)
        assert_allclose(ray_from_pixel([2.0, 4.0, 1.0], cam), [1.0, 2.0, 1.0])

    def test_rotated_rig_camera(self):
        cam = PinholeCamera(rotation=rot_z(90.0), translation=np.zeros(3), focal=2.0)
        # Rz(90) @ [1,2,1] = [-2,1,1]
        assert_allclose(ray_from_pixel([2.0, 4.0, 1.0], cam), [-2.0, 1.0, 1.0],
                        atol=1e-15)


class TestCorrespondenceTypes:
    def test_pixel_must_be_homogeneous(self):
        with pytest.raises(ValueError):
            Corr2D2D(p=[1.0, 2.0, 2.0], q=[0, 0, 1], tg=np.zeros(3))
        with pytest.raises(ValueError):
            Corr2D3D(p=[1.0, 2.0, 0.0], X=np.zeros(3))

    def test_zero_ray_rejected(self):
        with pytest.raises(ValueError):
            Corr2D2D(p=[1.0, 2.0, 1.0], q=[0.0, 0.0, 0.0], tg=np.zeros(3))

    def test_configuration_counts(self):
        c22 = [
            Corr2D2D(p=[0, 0, 1], q=[0, 0, 1], tg=[1, 0, 0], cam_index=0),
            Corr2D2D(p=[1, 0, 1], q=[0, 1, 1], tg=[1, 0, 0], cam_index=0),
            Corr2D2D(p=[0, 1, 1], q=[1, 0, 1], tg=[0, 1, 0], cam_index=1),
        ]
        c23 = [
            Corr2D3D(p=[0, 0, 1], X=[0, 0, 5]),
            Corr2D3D(p=[1, 1, 1], X=[1, 1, 5]),
        ]
        corrs = HybridCorrespondences(twod=c22, threed=c23)
        assert corrs.configuration() == (3, 2, 2)

    def test_configuration_no_2d2d(self):
        corrs = HybridCorrespondences(
            threed=[Corr2D3D(p=[0, 0, 1], X=[0, 0, 5])])
        assert corrs.configuration() == (0, 1, 0)

    def test_generalized_camera_indexing(self):
        cams = [PinholeCamera(rotation=np.eye(3), translation=[i, 0, 0], focal=1.0)
                for i in range(3)]
        rig = GeneralizedCamera(cameras=cams)
        assert len(rig) == 3
        assert_allclose(rig[2].translation, [2.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            GeneralizedCamera(cameras=[])


# A small scene worked fully by hand, reused across residual/depth tests:
# rig camera at center (1,0,0) sees the point X = (0,0,5) along q = (-1,0,5);
# the query camera (R = I, t = (0,0,1), f = 2) sees it at pixel (0,0,1).
HAND_POSE = dict(R=np.eye(3), t=np.array([0.0, 0.0, 1.0]), f=2.0)
HAND_22 = Corr2D2D(p=[0.0, 0.0, 1.0], q=[-1.0, 0.0, 5.0], tg=[1.0, 0.0, 0.0])
HAND_23 = Corr2D3D(p=[0.0, 0.0, 1.0], X=[0.0, 0.0, 5.0])


class TestResiduals:
    def test_2d2d_zero_on_consistent_data(self):
        pose = PoseWithFocal(**HAND_POSE)
        assert residual_2d2d(HAND_22, pose) == pytest.approx(0.0, abs=1e-15)

    def test_2d2d_hand_value_on_wrong_pixel(self):
        # v = K q = (-2,0,5), u = K tg + K t = (2,0,1), v x u = (0,12,0);
        # p = (0,1,1) gives p . (v x u) = 12
        pose = PoseWithFocal(**HAND_POSE)
        corr = Corr2D2D(p=[0.0, 1.0, 1.0], q=[-1.0, 0.0, 5.0], tg=[1.0, 0.0, 0.0])
        assert residual_2d2d(corr, pose) == pytest.approx(12.0)

    def test_2d3d_zero_on_consistent_data(self):
        pose = PoseWithFocal(**HAND_POSE)
        assert_allclose(residual_2d3d(HAND_23, pose), np.zeros(3), atol=1e-15)

    def test_2d3d_hand_value_on_wrong_pixel(self):
        # w = K (X + t) = (0,0,6); cross((1,1,1), w) = (6,-6,0)
        pose = PoseWithFocal(**HAND_POSE)
        corr = Corr2D3D(p=[1.0, 1.0, 1.0], X=[0.0, 0.0, 5.0])
        assert_allclose(residual_2d3d(corr, pose), [6.0, -6.0, 0.0])

    def test_2d3d_rank_two(self):
        # the residual is p x w, so it is always orthogonal to p
        rng = np.random.default_rng(0)
        pose = PoseWithFocal(R=rot_z(33.0), t=rng.normal(size=3), f=1.7)
        for _ in range(10):
            xy = rng.normal(size=2)
            corr = Corr2D3D(p=[xy[0], xy[1], 1.0], X=rng.normal(size=3))
            r = residual_2d3d(corr, pose)
            assert abs(r @ corr.p) < 1e-12 * max(1.0, np.linalg.norm(r))

    def test_residuals_invariant_to_ray_scale(self):
        pose = PoseWithFocal(R=rot_z(10.0), t=[0.3, -0.2, 0.9], f=1.5)
        c1 = Corr2D2D(p=[0.1, 0.2, 1.0], q=[-1.0, 0.5, 5.0], tg=[1.0, 0.0, 0.0])
        c2 = Corr2D2D(p=[0.1, 0.2, 1.0], q=[-3.0, 1.5, 15.0], tg=[1.0, 0.0, 0.0])
        r1 = residual_2d2d(c1, pose)
        r2 = residual_2d2d(c2, pose)
        assert r2 == pytest.approx(3.0 * r1)
        assert normalized_residual_2d2d(c1, pose) == pytest.approx(
            normalized_residual_2d2d(c2, pose))


class TestNormalizedResiduals:
    def test_zero_on_consistent_data(self):
        pose = PoseWithFocal(**HAND_POSE)
        assert normalized_residual_2d2d(HAND_22, pose) < 1e-15
        assert normalized_residual_2d3d(HAND_23, pose) < 1e-15

    def test_bounded_by_one(self):
        rng = np.random.default_rng(7)
        pose = PoseWithFocal(R=rot_z(-40.0), t=rng.normal(size=3), f=3.0)
        for _ in range(25):
            xy = rng.normal(size=2)
            c22 = Corr2D2D(p=[xy[0], xy[1], 1.0], q=rng.normal(size=3),
                           tg=rng.normal(size=3))
            c23 = Corr2D3D(p=[xy[1], xy[0], 1.0], X=rng.normal(size=3))
            assert 0.0 <= normalized_residual_2d2d(c22, pose) <= 1.0
            assert 0.0 <= normalized_residual_2d3d(c23, pose) <= 1.0


class TestRecoverDepths:
    def test_hand_scene_depths(self):
        pose = PoseWithFocal(**HAND_POSE)
        corrs = HybridCorrespondences(twod=[HAND_22], threed=[HAND_23])
        out = recover_depths(corrs, pose)
        # query-side depth of X is z = 6 (point at z=5, camera shifted by -1);
        # rig-side scale is 1 because q was chosen as exactly X - tg
        assert_allclose(out.depths_2d2d, [[6.0, 1.0]], atol=1e-12)
        assert_allclose(out.depths_2d3d, [6.0], atol=1e-12)
        assert out.cheirality_ok() is True
        assert not out.indeterminate.any()

    def test_point_behind_camera_fails_cheirality(self):
        pose = PoseWithFocal(R=np.eye(3), t=[0.0, 0.0, 1.0], f=2.0)
        corrs = HybridCorrespondences(
            threed=[Corr2D3D(p=[0.0, 0.0, 1.0], X=[0.0, 0.0, -5.0])])
        out = recover_depths(corrs, pose)
        assert_allclose(out.depths_2d3d, [-4.0], atol=1e-12)
        assert out.cheirality_ok() is False

    def test_parallel_rays_flagged_indeterminate(self):
        # query ray K^-1 p = (0,0,1) is parallel to q = (0,0,2): the 3x2
        # depth system is rank one and must be flagged, not solved
        pose = PoseWithFocal(R=np.eye(3), t=[0.0, 0.0, 1.0], f=2.0)
        corrs = HybridCorrespondences(
            twod=[Corr2D2D(p=[0.0, 0.0, 1.0], q=[0.0, 0.0, 2.0],
                                 tg=[0.0, 0.0, 0.0])])
        out = recover_depths(corrs, pose)
        assert out.indeterminate[0]
        assert np.isnan(out.depths_2d2d[0]).all()

    def test_no_depths_gives_none_cheirality(self):
        pose = PoseWithFocal(**HAND_POSE)
        assert pose.cheirality_ok() is None


class TestErrorMetrics:
    def test_rotation_error_exact_angle(self):
        assert rotation_error_deg(np.eye(3), rot_z(30.0)) == pytest.approx(30.0)

    def test_rotation_error_symmetric(self):
        a, b = rot_z(10.0), rot_z(-55.0)
        assert rotation_error_deg(a, b) == pytest.approx(rotation_error_deg(b, a))
        assert rotation_error_deg(a, b) == pytest.approx(65.0)

    def test_rotation_error_clips_roundoff(self):
        R = rot_z(0.0)
        assert rotation_error_deg(R, R) == 0.0

    def test_translation_error(self):
        assert translation_error([1, 2, 3], [1, 2, 4]) == pytest.approx(1.0)

    def test_focal_rel_error(self):
        assert focal_rel_error(1100.0, 1000.0) == pytest.approx(0.1)
        assert focal_rel_error(900.0, 1000.0) == pytest.approx(0.1)
