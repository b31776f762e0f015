"""Minimal solver for 5 2D-2D + 1 2D-3D correspondences through one rig camera.

With all five 2D-2D correspondences observed by the same rig camera G_i, the
2D-3D correspondence is converted into a sixth ray through G_i's center
(the ray to a known 3D point needs no intrinsics), which turns the problem
into relative pose between one calibrated camera and one camera with unknown
focal length from six point pairs.  That subproblem is solved exactly; the
translation scale is then fixed by the 3D point.

The six-pair core works on the fundamental matrix F with the query intrinsic
K = diag(f, f, 1) folded in: F spans a 3-dimensional nullspace of the six
epipolar constraints, F = x*B1 + y*B2 + B3, and the rank plus trace
conditions on diag(f,f,1)*F give 10 equations over the 10 bivariate cubic
monomials in (x, y), linear in the hidden variable u = f^2.  Solutions are
eigenpairs of the resulting 10x10 matrix pencil, polished by Gauss-Newton.
The system has up to 9 solutions.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .. import tolerances
from ..geometry import (
    Corr2D2D,
    PinholeCamera,
    PoseWithFocal,
    HybridCorrespondences,
    intrinsic_matrix,
    recover_depths,
)
from ..bench import SampleSpec
from . import (
    SolverEntry,
    register,
    DegenerateConfigurationError,
    DegenerateInputError,
    ScaleIndeterminateError,
)

# bivariate monomials of degree <= 3, highest degree first
MONOMIALS = [(3, 0), (2, 1), (1, 2), (0, 3),
             (2, 0), (1, 1), (0, 2), (1, 0), (0, 1), (0, 0)]
_MIDX = {m: i for i, m in enumerate(MONOMIALS)}
IDX_X, IDX_Y, IDX_1 = _MIDX[(1, 0)], _MIDX[(0, 1)], _MIDX[(0, 0)]

# index of the reduced monomial and the exponent factor, for d/dx and d/dy
_DX = [(_MIDX[(i - 1, j)], i) if i > 0 else (0, 0) for i, j in MONOMIALS]
_DY = [(_MIDX[(i, j - 1)], j) if j > 0 else (0, 0) for i, j in MONOMIALS]

_D11 = np.diag([1.0, 1.0, 0.0])
_E33 = np.diag([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class FundamentalNullspace:
    """Basis of the F-matrix family satisfying the six epipolar constraints."""
    basis: tuple            # three 3x3 matrices; F = x*B1 + y*B2 + B3
    pixel_scale: float      # query pixels were multiplied by this factor

    @property
    def count(self):
        return len(self.basis)


def _mono_vector(x, y):
    return np.array([x ** i * y ** j for i, j in MONOMIALS])


def _mono_dx(m):
    out = np.zeros_like(m)
    for k, (src, fac) in enumerate(_DX):
        if fac:
            out[k] = fac * m[src]
    return out


def _mono_dy(m):
    out = np.zeros_like(m)
    for k, (src, fac) in enumerate(_DY):
        if fac:
            out[k] = fac * m[src]
    return out


def project_3d_to_sixth_match(c3d, rig_cam: PinholeCamera):
    """Convert a 2D-3D correspondence into a 2D-2D one through ``rig_cam``.

    The rig-frame ray to a known 3D point is simply X - center, so only the
    camera center matters for the ray; the rotation is used to report whether
    the point lies in front of the camera.

    Returns:
        (Corr2D2D, in_front flag)
    """
    q = np.asarray(c3d.X, dtype=float) - rig_cam.translation
    nq = np.linalg.norm(q)
    if nq < 1e-12:
        raise DegenerateInputError("3D point coincides with the rig camera center")
    local_z = (rig_cam.rotation.T @ q)[2]
    corr = Corr2D2D(p=c3d.p, q=q, tg=rig_cam.translation)
    return corr, bool(local_z > 0)


def _nullspace(corrs):
    """3-dim F-nullspace of the 6 epipolar constraints p^T F q = 0."""
    ps = np.array([c.p for c in corrs])
    qs = np.array([c.q for c in corrs])
    qs = qs / np.linalg.norm(qs, axis=1, keepdims=True)
    # isotropic conditioning of the query pixels; the recovered focal is
    # divided by the same factor afterwards
    spread = np.mean(np.linalg.norm(ps[:, :2], axis=1))
    s = np.sqrt(2.0) / spread if spread > 1e-12 else 1.0
    ps = ps * np.array([s, s, 1.0])
    A = np.einsum("ni,nj->nij", ps, qs).reshape(6, 9)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, sv, Vt = np.linalg.svd(A)
    if sv[5] < tolerances.CONDITIONING_TOL * sv[0]:
        raise DegenerateConfigurationError(
            "epipolar constraint matrix is rank-deficient (nullspace > 3)")
    basis = tuple(Vt[k].reshape(3, 3) for k in (6, 7, 8))
    return FundamentalNullspace(basis=basis, pixel_scale=s)


def _coefficient_matrices(ns: FundamentalNullspace):
    """10x10 pencil (M0, M1): rows are det(F) and the 9 entries of the trace
    condition on diag(f,f,1) F, columns the cubic monomials, u = f^2 the
    pencil variable."""
    B = ns.basis
    M0 = np.zeros((10, 10))
    M1 = np.zeros((10, 10))
    for a in range(3):
        for b in range(3):
            tr_d = np.trace(B[a] @ B[b].T @ _D11)
            tr_e = np.trace(B[a] @ B[b].T @ _E33)
            left_d = B[a] @ B[b].T @ _D11
            left_e = B[a] @ B[b].T @ _E33
            for c in range(3):
                i = (a == 0) + (b == 0) + (c == 0)
                j = (a == 1) + (b == 1) + (c == 1)
                k = _MIDX[(i, j)]
                P = 2.0 * left_d @ B[c] - tr_d * B[c]
                Q = 2.0 * left_e @ B[c] - tr_e * B[c]
                M1[1:, k] += P.ravel()
                M0[1:, k] += Q.ravel()
                M0[0, k] += np.linalg.det(
                    np.column_stack([B[a][:, 0], B[b][:, 1], B[c][:, 2]]))
    return M0, M1


def _residual(M0, M1, x, y, u):
    m = _mono_vector(x, y)
    return M0 @ m + u * (M1 @ m)


def _polish(M0, M1, x, y, u, iters=25):
    z = np.array([x, y, u])
    m = _mono_vector(z[0], z[1])
    r = M0 @ m + z[2] * (M1 @ m)
    best = np.linalg.norm(r)
    for _ in range(iters):
        M = M0 + z[2] * M1
        J = np.column_stack([M @ _mono_dx(m), M @ _mono_dy(m), M1 @ m])
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        z_new = z + step
        m_new = _mono_vector(z_new[0], z_new[1])
        r_new = M0 @ m_new + z_new[2] * (M1 @ m_new)
        nrm = np.linalg.norm(r_new)
        if not np.isfinite(nrm) or nrm >= best:
            break
        z, m, r, best = z_new, m_new, r_new, nrm
        if best < 1e-14:
            break
    return z, best


def solve_onesided_focal_6pt(corrs):
    """All (F, f) solutions for 6 rays through one rig camera center.

    Args:
        corrs: six Corr2D2D sharing tg.
    Returns:
        list of (F, f): F normalized to unit Frobenius norm in the original
        pixel units, f > 0 in the same units as the input pixels.
    """
    if len(corrs) != 6:
        raise ValueError("need exactly 6 correspondences")
    tg0 = corrs[0].tg
    for c in corrs[1:]:
        if not np.allclose(c.tg, tg0, atol=1e-9):
            raise ValueError("all correspondences must share one rig camera")

    ns = _nullspace(corrs)
    M0, M1 = _coefficient_matrices(ns)

    # a pure-rotation configuration makes det vanish on the whole nullspace
    if np.abs(M0[0]).max() < 1e-10:
        raise DegenerateConfigurationError(
            "degenerate (zero-baseline) configuration: det(F) vanishes "
            "identically on the nullspace")

    vals, vecs = scipy.linalg.eig(M0, -M1)
    sols = []
    for idx in range(len(vals)):
        u = vals[idx]
        if not np.isfinite(u):
            continue
        if abs(u.imag) > tolerances.REAL_ROOT_TOL * max(1.0, abs(u.real)):
            continue
        u = float(u.real)
        v = vecs[:, idx]
        # rotate the eigenvector's phase so its dominant entry is real
        v = v * np.exp(-1j * np.angle(v[np.argmax(np.abs(v))]))
        v = v.real
        den = v[IDX_1]
        if abs(den) > 1e-8 * np.abs(v).max():
            x, y = v[IDX_X] / den, v[IDX_Y] / den
        elif abs(v[IDX_X]) > 1e-8 * np.abs(v).max():
            x = v[_MIDX[(2, 0)]] / v[IDX_X]
            y = v[_MIDX[(1, 1)]] / v[IDX_X]
        else:
            continue
        (x, y, u), res = _polish(M0, M1, x, y, u)
        if u <= 0:
            continue
        # residuals are compared at the scale of the monomial vector: roots
        # far out in the (x, y) chart evaluate to large absolute numbers
        scale = np.linalg.norm(_mono_vector(x, y)) * (1.0 + abs(u))
        if res > 1e-9 * scale:
            continue
        if any(abs(u - su) <= 1e-6 * max(1.0, abs(su))
               and abs(x - sx) <= 1e-6 * max(1.0, abs(sx))
               and abs(y - sy) <= 1e-6 * max(1.0, abs(sy))
               for sx, sy, su in sols):
            continue
        sols.append((x, y, u))

    out = []
    for x, y, u in sols:
        F = x * ns.basis[0] + y * ns.basis[1] + ns.basis[2]
        f = np.sqrt(u) / ns.pixel_scale
        # undo the pixel conditioning: p was scaled by diag(s,s,1)
        F = np.diag([ns.pixel_scale, ns.pixel_scale, 1.0]) @ F
        F /= np.linalg.norm(F)
        out.append((F, float(f)))
    out.sort(key=lambda t: t[1])
    return out


def decompose_to_pose(F, f, corrs):
    """Rotation and unit translation from (F, f) by cheirality majority vote.

    Triangulates all six correspondences in the four candidate
    decompositions of the essential matrix and keeps the one with the most
    positive depth pairs (at least 4 of 6 required).
    """
    E = np.diag([1.0, 1.0, 1.0 / f]) @ F
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    Kinv = np.diag([1.0 / f, 1.0 / f, 1.0])
    best = None
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            votes = 0
            for c in corrs:
                x2 = Kinv @ c.p
                A = np.column_stack([x2, -(R @ c.q)])
                ab, *_ = np.linalg.lstsq(A, t, rcond=None)
                if ab[0] > 0 and ab[1] > 0:
                    votes += 1
            if best is None or votes > best[0]:
                best = (votes, R, t)
    if best is None or best[0] < 4:
        return []
    _, R, t = best
    return [PoseWithFocal(R=R, t=t, f=f)]


def recover_scale(pose_dir: PoseWithFocal, c3d, tg):
    """Fix the translation scale from the 2D-3D correspondence.

    The direction-only pose from the six-ray subproblem lives in the frame
    of the rig camera's center; the 3D point gives two linear equations in
    the scale s, solved in least squares, and the rig camera offset is then
    folded back: t = s * t_dir - R @ tg.
    """
    K = pose_dir.K
    R = pose_dir.R
    p = np.asarray(c3d.p, dtype=float)
    a = np.cross(p, K @ pose_dir.t)
    b = -np.cross(p, K @ (R @ (np.asarray(c3d.X) - np.asarray(tg))))
    denom = a @ a
    if denom < 1e-12 * max(1.0, b @ b):
        raise ScaleIndeterminateError(
            "translation scale unobservable from the 2D-3D correspondence")
    s = (a @ b) / denom
    t = s * pose_dir.t - R @ np.asarray(tg)
    w = R @ np.asarray(c3d.X) + t
    return PoseWithFocal(R=R, t=t, f=pose_dir.f, depths_2d3d=np.array([w[2]]))


def solve(corrs: HybridCorrespondences):
    """End-to-end solver: returns all cheirality-consistent metric poses."""
    m, n, k = corrs.configuration()
    if (m, n) != (5, 1) or k != 5:
        raise ValueError(
            f"this solver needs 5 2D-2D through one rig camera plus 1 2D-3D, "
            f"got (m, n, [k]) = ({m}, {n}, [{k}])")
    c3d = corrs.threed[0]
    tg = corrs.twod[0].tg
    cam_index = corrs.twod[0].cam_index

    q6 = np.asarray(c3d.X, dtype=float) - np.asarray(tg)
    if np.linalg.norm(q6) < 1e-12:
        raise DegenerateInputError("3D point coincides with the rig camera center")
    sixth = Corr2D2D(p=c3d.p, q=q6, tg=tg, cam_index=cam_index)
    six = list(corrs.twod) + [sixth]

    poses = []
    for F, f in solve_onesided_focal_6pt(six):
        for pose_dir in decompose_to_pose(F, f, six):
            try:
                pose = recover_scale(pose_dir, c3d, tg)
            except ScaleIndeterminateError:
                continue
            poses.append(recover_depths(corrs, pose))
    poses.sort(key=lambda p: p.f)
    return poses


register(SolverEntry(
    name="h51f5",
    solve=solve,
    sample_spec=SampleSpec(cam_groups=(5,), n=1),
    description="5 2D-2D through one rig camera + 1 2D-3D, up to 9 solutions",
))
