"""Tests for the 5 2D-2D (one rig camera) + 1 2D-3D minimal solver."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from semigen import (
    Corr2D2D,
    Corr2D3D,
    HybridCorrespondences,
    PinholeCamera,
    PoseWithFocal,
    normalized_residual_2d2d,
    normalized_residual_2d3d,
    rotation_error_deg,
    translation_error,
    focal_rel_error,
)
from semigen.bench import SceneConfig, SampleSpec, generate_scene, draw_minimal_sample
from semigen.solvers import (
    DegenerateConfigurationError,
    DegenerateInputError,
    ScaleIndeterminateError,
    get_solver,
)
from semigen.solvers.h51f5 import (
    _nullspace,
    project_3d_to_sixth_match,
    solve_onesided_focal_6pt,
    decompose_to_pose,
    recover_scale,
    solve,
)

CFG = SceneConfig(num_scenes=200, num_points=30, seed=77)
SPEC = SampleSpec(cam_groups=(5,), n=1)


def scene_sample(index, seed=5):
    s = generate_scene(CFG, index)
    rng = np.random.default_rng([seed, index])
    return s, draw_minimal_sample(s, SPEC, rng, noisy=False)


def sixth_from(sample):
    c3 = sample.threed[0]
    tg = sample.twod[0].tg
    return Corr2D2D(p=c3.p, q=np.asarray(c3.X) - tg, tg=tg,
                    cam_index=sample.twod[0].cam_index)


def rand_rot(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


class TestSixthMatch:
    def test_point_on_optical_axis(self):
        cam = PinholeCamera(rotation=np.eye(3), translation=[1.0, 0.0, 0.0],
                            focal=2.0)
        c3 = Corr2D3D(p=[0.0, 0.0, 1.0], X=[1.0, 0.0, 4.0])
        corr, in_front = project_3d_to_sixth_match(c3, cam)
        # the ray to the point is X - center = (0, 0, 4): the optical axis
        assert_allclose(corr.q / np.linalg.norm(corr.q), [0.0, 0.0, 1.0])
        assert in_front

    def test_point_behind_camera_flagged(self):
        cam = PinholeCamera(rotation=np.eye(3), translation=np.zeros(3),
                            focal=1.0)
        c3 = Corr2D3D(p=[0.0, 0.0, 1.0], X=[0.0, 0.0, -3.0])
        corr, in_front = project_3d_to_sixth_match(c3, cam)
        assert not in_front

    def test_point_at_center_rejected(self):
        cam = PinholeCamera(rotation=np.eye(3), translation=[1.0, 2.0, 3.0],
                            focal=1.0)
        with pytest.raises(DegenerateInputError):
            project_3d_to_sixth_match(Corr2D3D(p=[0, 0, 1], X=[1.0, 2.0, 3.0]),
                                      cam)

    def test_consistent_with_scene_ground_truth(self):
        s, sample = scene_sample(0)
        corr = sixth_from(sample)
        assert normalized_residual_2d2d(corr, s.ground_truth) < 1e-12


class TestNullspace:
    def test_basis_satisfies_constraints(self):
        _, sample = scene_sample(1)
        six = list(sample.twod) + [sixth_from(sample)]
        ns = _nullspace(six)
        assert ns.count == 3
        S = np.diag([ns.pixel_scale, ns.pixel_scale, 1.0])
        for B in ns.basis:
            for c in six:
                q = c.q / np.linalg.norm(c.q)
                assert abs((S @ c.p) @ B @ q) < 1e-10


class TestOnesidedFocal6pt:
    def test_recovers_ground_truth_focal(self):
        for idx in range(5):
            s, sample = scene_sample(idx)
            six = list(sample.twod) + [sixth_from(sample)]
            sols = solve_onesided_focal_6pt(six)
            f_true = s.ground_truth.f
            assert min(abs(f - f_true) / f_true for _, f in sols) < 1e-6

    def test_returned_f_matrices_satisfy_constraints(self):
        _, sample = scene_sample(2)
        six = list(sample.twod) + [sixth_from(sample)]
        for F, f in solve_onesided_focal_6pt(six):
            assert abs(np.linalg.det(F)) < 1e-8
            for c in six:
                q = c.q / np.linalg.norm(c.q)
                p = np.asarray(c.p)
                # scale-free epipolar residual
                num = abs(p @ F @ q)
                den = np.linalg.norm(p) * np.linalg.norm(F @ q)
                assert num / den < 1e-8
            # the trace condition of a matrix decomposable as [t]x R after
            # removing the focal: 2 E E^T E - tr(E E^T) E = 0
            E = np.diag([1.0, 1.0, 1.0 / f]) @ F
            E /= np.linalg.norm(E)
            T = 2.0 * E @ E.T @ E - np.trace(E @ E.T) * E
            assert np.abs(T).max() < 1e-6

    def test_count_never_exceeds_nine(self):
        rng = np.random.default_rng(3)
        for idx in range(30):
            s, sample = scene_sample(idx)
            six = list(sample.twod) + [sixth_from(sample)]
            assert len(solve_onesided_focal_6pt(six)) <= 9

    def test_pure_rotation_degenerate(self):
        # query camera placed exactly at the rig camera center: no baseline
        rng = np.random.default_rng(4)
        tg = rng.normal(size=3)
        R = rand_rot(rng)
        f = 1.3
        K = np.diag([f, f, 1.0])
        t = -R @ tg            # center of P == tg
        corrs = []
        for _ in range(6):
            q = rng.normal(size=3)
            w = K @ (R @ (tg + 2.0 * q) + t)
            corrs.append(Corr2D2D(p=w / w[2], q=q, tg=tg))
        with pytest.raises(DegenerateConfigurationError):
            solve_onesided_focal_6pt(corrs)

    def test_mismatched_rig_camera_rejected(self):
        _, sample = scene_sample(3)
        six = list(sample.twod) + [sixth_from(sample)]
        bad = Corr2D2D(p=six[0].p, q=six[0].q, tg=six[0].tg + 1.0)
        with pytest.raises(ValueError):
            solve_onesided_focal_6pt(six[:5] + [bad])


class TestDecompose:
    def test_recovers_rotation(self):
        s, sample = scene_sample(4)
        six = list(sample.twod) + [sixth_from(sample)]
        gt = s.ground_truth
        sols = solve_onesided_focal_6pt(six)
        best = None
        for F, f in sols:
            for pose in decompose_to_pose(F, f, six):
                e = rotation_error_deg(pose.R, gt.R)
                best = e if best is None else min(best, e)
        assert best < 1e-6

    def test_sign_of_f_matrix_irrelevant(self):
        _, sample = scene_sample(5)
        six = list(sample.twod) + [sixth_from(sample)]
        F, f = solve_onesided_focal_6pt(six)[0]
        a = decompose_to_pose(F, f, six)
        b = decompose_to_pose(-F, f, six)
        assert len(a) == len(b) == 1
        assert rotation_error_deg(a[0].R, b[0].R) < 1e-9
        assert_allclose(a[0].t, b[0].t, atol=1e-9)

    def test_cheirality_majority_required(self):
        # reflected data (all rays negated on one side) admits no
        # decomposition with mostly positive depths
        s, sample = scene_sample(6)
        six = list(sample.twod) + [sixth_from(sample)]
        F, f = solve_onesided_focal_6pt(six)[0]
        flipped = [Corr2D2D(p=c.p, q=-np.asarray(c.q), tg=c.tg) for c in six]
        sols = decompose_to_pose(F, f, flipped)
        for pose in sols:
            # if anything is returned, it must still have won a majority
            votes = 0
            Kinv = np.diag([1.0 / f, 1.0 / f, 1.0])
            for c in flipped:
                A = np.column_stack([Kinv @ c.p, -(pose.R @ c.q)])
                ab, *_ = np.linalg.lstsq(A, pose.t, rcond=None)
                votes += bool(ab[0] > 0 and ab[1] > 0)
            assert votes >= 4


class TestRecoverScale:
    def test_matches_ground_truth_baseline(self):
        s, sample = scene_sample(7)
        gt = s.ground_truth
        tg = sample.twod[0].tg
        t_prime = gt.R @ tg + gt.t
        scale_true = np.linalg.norm(t_prime)
        pose_dir = PoseWithFocal(R=gt.R, t=t_prime / scale_true, f=gt.f)
        pose = recover_scale(pose_dir, sample.threed[0], tg)
        assert_allclose(pose.t, gt.t, rtol=1e-8, atol=1e-10)

    def test_negated_direction_gives_negative_depth(self):
        s, sample = scene_sample(7)
        gt = s.ground_truth
        tg = sample.twod[0].tg
        t_prime = gt.R @ tg + gt.t
        nrm = np.linalg.norm(t_prime)
        pose_dir = PoseWithFocal(R=gt.R, t=-t_prime / nrm, f=gt.f)
        pose = recover_scale(pose_dir, sample.threed[0], tg)
        # s flips sign, so the recovered translation is unchanged
        assert_allclose(pose.t, gt.t, rtol=1e-8, atol=1e-10)

    def test_distant_point_ill_conditioned(self):
        s, sample = scene_sample(7)
        gt = s.ground_truth
        tg = sample.twod[0].tg
        t_prime = gt.R @ tg + gt.t
        pose_dir = PoseWithFocal(R=gt.R, t=t_prime / np.linalg.norm(t_prime),
                                 f=gt.f)
        far = Corr2D3D(p=[0.0, 0.0, 1.0], X=1e14 * np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ScaleIndeterminateError):
            recover_scale(pose_dir, far, tg)


class TestEndToEnd:
    def test_ground_truth_among_solutions(self):
        for idx in range(20):
            s, sample = scene_sample(idx)
            gt = s.ground_truth
            sols = solve(sample)
            errs = [(rotation_error_deg(p.R, gt.R),
                     translation_error(p.t, gt.t),
                     focal_rel_error(p.f, gt.f)) for p in sols]
            r, t, f = min(errs)
            assert r < 1e-6
            assert t < 1e-6 * np.linalg.norm(gt.t)
            assert f < 1e-6

    def test_all_solutions_satisfy_residuals(self):
        for idx in range(20):
            _, sample = scene_sample(idx, seed=6)
            for pose in solve(sample):
                for c in sample.twod:
                    assert normalized_residual_2d2d(c, pose) < 1e-6
                for c in sample.threed:
                    assert normalized_residual_2d3d(c, pose) < 1e-6

    def test_scene_scale_invariance(self):
        _, sample = scene_sample(8)
        lam = 3.7
        scaled = HybridCorrespondences(
            twod=[Corr2D2D(p=c.p, q=c.q, tg=lam * np.asarray(c.tg),
                           cam_index=c.cam_index) for c in sample.twod],
            threed=[Corr2D3D(p=c.p, X=lam * np.asarray(c.X))
                    for c in sample.threed])
        a = solve(sample)
        b = solve(scaled)
        assert len(a) == len(b)
        for pa, pb in zip(a, b):
            assert rotation_error_deg(pa.R, pb.R) < 1e-7
            assert focal_rel_error(pa.f, pb.f) < 1e-7
            assert_allclose(pb.t, lam * pa.t, rtol=1e-6, atol=1e-8)

    def test_solutions_carry_depths(self):
        _, sample = scene_sample(9)
        sols = solve(sample)
        assert any(p.cheirality_ok() for p in sols)
        for p in sols:
            assert p.depths_2d2d.shape == (5, 2)
            assert p.depths_2d3d.shape == (1,)

    def test_rejects_wrong_configuration(self):
        _, sample = scene_sample(0)
        with pytest.raises(ValueError):
            solve(HybridCorrespondences(twod=sample.twod[:4],
                                        threed=sample.threed))
        mixed = list(sample.twod[:4]) + [
            Corr2D2D(p=sample.twod[4].p, q=sample.twod[4].q,
                     tg=np.asarray(sample.twod[4].tg) + 1.0, cam_index=9)]
        with pytest.raises(ValueError):
            solve(HybridCorrespondences(twod=mixed, threed=sample.threed))

    def test_registered(self):
        entry = get_solver("h51f5")
        assert entry.sample_spec.cam_groups == (5,)
        assert entry.sample_spec.n == 1
