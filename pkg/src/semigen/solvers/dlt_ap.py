"""Absolute-pose baseline: 6-point DLT with unit-aspect intrinsic extraction.

Estimates the full 3x4 projection matrix from >= 6 2D-3D correspondences
(direct linear transform with Hartley normalization), then factors it under
the K = diag(f, f, 1) camera model.  Used as the comparison baseline in the
noise benchmark; it ignores 2D-2D correspondences entirely.
"""

import numpy as np

from ..geometry import PoseWithFocal
from ..bench import SampleSpec
from . import SolverEntry, register

MIN_POINTS = 6


def _normalizer_2d(pts):
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    if d < 1e-12:
        return None
    s = np.sqrt(2.0) / d
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return T


def _normalizer_3d(pts):
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    if d < 1e-12:
        return None
    s = np.sqrt(3.0) / d
    U = np.eye(4)
    U[:3, :3] *= s
    U[:3, 3] = -s * c
    return U


def solve(corrs):
    """Return the single DLT pose estimate, or [] when degenerate."""
    pts2 = np.array([c.p[:2] for c in corrs.threed])
    pts3 = np.array([c.X for c in corrs.threed])
    if len(pts2) < MIN_POINTS:
        raise ValueError(f"DLT baseline needs >= {MIN_POINTS} 2D-3D "
                         f"correspondences, got {len(pts2)}")

    T = _normalizer_2d(pts2)
    U = _normalizer_3d(pts3)
    if T is None or U is None:
        return []
    p2 = (np.column_stack([pts2, np.ones(len(pts2))]) @ T.T)[:, :2]
    X4 = np.column_stack([pts3, np.ones(len(pts3))]) @ U.T

    rows = []
    for (x, y), X in zip(p2, X4):
        rows.append(np.concatenate([np.zeros(4), -X, y * X]))
        rows.append(np.concatenate([X, np.zeros(4), -x * X]))
    A = np.array(rows)
    _, sv, Vt = np.linalg.svd(A)
    if sv[-2] < 1e-12 * sv[0]:
        return []                       # rank-deficient: points degenerate
    P = Vt[-1].reshape(3, 4)
    P = np.linalg.inv(T) @ P @ U        # undo the conditioning transforms

    M = P[:, :3]
    lam = np.linalg.norm(M[2])
    if lam < 1e-12:
        return []
    if np.linalg.det(M) < 0:
        lam = -lam
    P = P / lam
    M = P[:, :3]
    f = 0.5 * (np.linalg.norm(M[0]) + np.linalg.norm(M[1]))
    if not (f > 1e-12):
        return []
    R0 = np.vstack([M[0] / f, M[1] / f, M[2]])
    Uo, _, Vto = np.linalg.svd(R0)
    R = Uo @ np.diag([1.0, 1.0, np.linalg.det(Uo @ Vto)]) @ Vto
    t = np.array([P[0, 3] / f, P[1, 3] / f, P[2, 3]])
    return [PoseWithFocal(R=R, t=t, f=float(f))]


register(SolverEntry(
    name="dlt-ap",
    solve=solve,
    sample_spec=SampleSpec(cam_groups=(), n=MIN_POINTS),
    description="6-point DLT absolute-pose baseline with unknown focal",
))
