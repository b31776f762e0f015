"""Minimal solver for 1 2D-2D + 3 2D-3D correspondences.

The three 3D points span a plane, so the query camera sees them through a
plane-to-image homography H_K = K (R - t N^T).  The problem is first moved
into a canonical frame: the 2D-2D rig camera center at the origin, the plane
normal along +z and scaled so the plane is z = -1 (N = [0, 0, 1]), the
2D-2D ray rotated to [r, 0, 1], and query pixels isotropically rescaled.
The three point projections leave a 3-dimensional nullspace for H_K; the
remaining unknowns are the nullspace coordinates n, the scaled translation
t_K = K t, and w = 1/f, tied together by the six entries of
(K^-1 A)^T (K^-1 A) = I for A = H_K + t_K N^T and by the epipolar
constraint of the 2D-2D correspondence.

Solutions come in mirror pairs (n, t_K) <-> (-n, -t_K) (one member per pair
decomposes with a proper rotation); identifying mirrors, the problem has up
to 12 solutions.  The solver returns one proper-rotation representative per
pair.

Backend: the three translation-free orthonormality equations constrain the
direction of n to a quartic curve on the unit sphere, along which scale,
focal and translation have closed forms up to the sign of the rotation's
third column.  The solver sweeps a fixed spherical grid for that curve
(marching-squares cell pairing, so curve sections of any orientation are
caught), walks each curve segment looking for sign changes of the two
epipolar branch functions, and polishes each bracketed zero with a damped
Newton iteration on the full square system.  Deterministic by construction:
no random starts.
"""

from dataclasses import dataclass

import numpy as np

from .. import tolerances
from ..geometry import (
    Corr2D2D,
    Corr2D3D,
    HybridCorrespondences,
    PoseWithFocal,
    recover_depths,
)
from ..bench import SampleSpec
from . import (
    SolverEntry,
    register,
    DegenerateConfigurationError,
    DegenerateInputError,
)

# spherical sweep resolution; segment subdivision gives ~0.3 deg along-curve
N_LAT = 80
N_AZ = 224
SEG_SAMPLES = 6

# column index pairs of the orthonormality conditions, diagonal first
_PAIRS = ((0, 0), (1, 1), (0, 1), (0, 2), (1, 2), (2, 2))
_PI = np.array([p[0] for p in _PAIRS])
_PJ = np.array([p[1] for p in _PAIRS])
_PD = np.array([1.0 if i == j else 0.0 for i, j in _PAIRS])
_MI = (_PI == 2).astype(float)
_MJ = (_PJ == 2).astype(float)


@dataclass(frozen=True)
class H13fFrame:
    """Gauge transforms taking the input into the canonical frame.

    Canonical rig coordinates are X_c = scale * R_g @ (X - t_shift); the
    plane of the three points becomes z = -1 (so the plane vector is
    N = [0, 0, d] with d = 1), the 2D-2D camera center the origin, and the
    2D-2D ray [r, 0, 1].  Query pixels are scaled by pixel_scale.
    """
    R_g: np.ndarray
    t_shift: np.ndarray
    scale: float
    pixel_scale: float
    d: float
    r: float
    x1: float
    y1: float

    def to_canonical_point(self, X):
        return self.scale * (self.R_g @ (np.asarray(X, dtype=float) - self.t_shift))

    def pose_from_canonical(self, R_c, t_c, f_c):
        """Map a canonical-frame pose back to the input frame."""
        R = R_c @ self.R_g
        t = np.asarray(t_c) / self.scale - R @ self.t_shift
        f = f_c / self.pixel_scale
        return R, t, f


@dataclass(frozen=True)
class HKNullspace:
    basis: tuple               # three 3x3 matrices N1, N2, N3

    def matrix(self, n):
        n = np.asarray(n, dtype=float)
        return n[0] * self.basis[0] + n[1] * self.basis[1] + n[2] * self.basis[2]


def _scale_pixel(p, s):
    return np.array([s * p[0], s * p[1], 1.0])


def canonicalize_h13f(corrs: HybridCorrespondences):
    """Move the problem into the canonical gauge.

    Returns (frame, canonical correspondences).  Raises DegenerateInputError
    for collinear points, a plane through the 2D-2D camera center, or a
    2D-2D ray parallel to the plane.
    """
    c1 = corrs.twod[0]
    pts = [np.asarray(c.X, dtype=float) for c in corrs.threed]
    t_shift = np.asarray(c1.tg, dtype=float)
    rel = [X - t_shift for X in pts]

    nrm = np.cross(rel[1] - rel[0], rel[2] - rel[0])
    span = max(np.linalg.norm(rel[1] - rel[0]), np.linalg.norm(rel[2] - rel[0]))
    if np.linalg.norm(nrm) < 1e-10 * span * span:
        raise DegenerateInputError("the three 3D points are (nearly) collinear")
    u = nrm / np.linalg.norm(nrm)
    z0 = u @ rel[0]
    if abs(z0) < 1e-10 * max(1.0, span):
        raise DegenerateInputError(
            "the points' plane passes through the 2D-2D rig camera center")
    if z0 > 0:
        u = -u
        z0 = -z0
    # rotation with third row u (maps u to +z), deterministic completion
    e = np.eye(3)[int(np.argmin(np.abs(u)))]
    x_axis = e - (e @ u) * u
    x_axis /= np.linalg.norm(x_axis)
    R1 = np.vstack([x_axis, np.cross(u, x_axis), u])

    q = R1 @ np.asarray(c1.q, dtype=float)
    if abs(q[2]) < 1e-10 * np.linalg.norm(q):
        raise DegenerateInputError("2D-2D ray is parallel to the points' plane")
    q = q / q[2]
    theta = np.arctan2(q[1], q[0])
    c, s = np.cos(-theta), np.sin(-theta)
    R2 = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    R_g = R2 @ R1
    r = float(np.hypot(q[0], q[1]))

    scale = -1.0 / z0          # plane becomes z = -1, i.e. d = 1
    ps = [np.asarray(cc.p, dtype=float) for cc in corrs.threed] + [np.asarray(c1.p)]
    spread = np.mean([np.linalg.norm(p[:2]) for p in ps])
    pixel_scale = np.sqrt(2.0) / spread if spread > 1e-12 else 1.0

    frame = H13fFrame(R_g=R_g, t_shift=t_shift, scale=scale,
                      pixel_scale=pixel_scale, d=1.0, r=r,
                      x1=pixel_scale * c1.p[0], y1=pixel_scale * c1.p[1])
    canon = HybridCorrespondences(
        twod=[Corr2D2D(p=[frame.x1, frame.y1, 1.0], q=[r, 0.0, 1.0],
                       tg=np.zeros(3), cam_index=c1.cam_index)],
        threed=[Corr2D3D(p=_scale_pixel(c.p, pixel_scale),
                         X=frame.to_canonical_point(c.X))
                for c in corrs.threed])
    return frame, canon


def build_hk_nullspace(corrs3d):
    """Nullspace of the six projection constraints [p]x (H_K X) = 0."""
    rows = []
    for c in corrs3d:
        p = np.asarray(c.p, dtype=float)
        X = np.asarray(c.X, dtype=float)
        # first two rows of [p]x applied to H_K X, linear in vec(H_K)
        rows.append(np.concatenate([np.zeros(3), -X, p[1] * X]))
        rows.append(np.concatenate([X, np.zeros(3), -p[0] * X]))
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, sv, Vt = np.linalg.svd(A)
    if sv[5] < tolerances.CONDITIONING_TOL * sv[0]:
        raise DegenerateConfigurationError(
            "projection constraints are rank-deficient (nullspace > 3)")
    return HKNullspace(basis=tuple(Vt[k].reshape(3, 3) for k in (6, 7, 8)))


def _residuals(z, Ns, d, qc, p1):
    """Square-system residuals, batched.  z: (B,7) = (n, t_K, w)."""
    n, tK, w = z[:, :3], z[:, 3:6], z[:, 6]
    A = np.einsum("ba,aij->bij", n, Ns)
    A[:, :, 2] += d * tK
    w2 = (w * w)[:, None]
    Ai = A[:, :, _PI]          # (B, 3, 6) columns gathered per pair
    Aj = A[:, :, _PJ]
    r = np.empty((z.shape[0], 7))
    r[:, :6] = (w2 * (Ai[:, 0] * Aj[:, 0] + Ai[:, 1] * Aj[:, 1])
                + Ai[:, 2] * Aj[:, 2] - _PD)
    Aq = A @ qc
    r[:, 6] = np.einsum("bi,bi->b", Aq, np.cross(tK, p1))
    return r


def _residuals_and_jac(z, Ns, d, qc, p1):
    B = z.shape[0]
    E = np.stack(Ns) if not isinstance(Ns, np.ndarray) else Ns
    EuI, EuJ = E[:, :2, _PI], E[:, :2, _PJ]
    EbI, EbJ = E[:, 2, _PI], E[:, 2, _PJ]
    n, tK, w = z[:, :3], z[:, 3:6], z[:, 6]
    A = np.einsum("ba,aij->bij", n, E)
    A[:, :, 2] += d * tK
    w2 = w * w
    Ai = A[:, :, _PI]
    Aj = A[:, :, _PJ]
    upper = Ai[:, 0] * Aj[:, 0] + Ai[:, 1] * Aj[:, 1]
    r = np.empty((B, 7))
    r[:, :6] = w2[:, None] * upper + Ai[:, 2] * Aj[:, 2] - _PD
    J = np.zeros((B, 7, 7))
    S_up = (np.einsum("ark,brk->bka", EuI, Aj[:, :2])
            + np.einsum("brk,ark->bka", Ai[:, :2], EuJ))
    S_bot = (np.einsum("ak,bk->bka", EbI, Aj[:, 2])
             + np.einsum("bk,ak->bka", Ai[:, 2], EbJ))
    J[:, :6, :3] = w2[:, None, None] * S_up + S_bot
    # t_K enters column 2 of A only
    J[:, :6, 3] = d * w2[:, None] * (_MJ * Ai[:, 0] + _MI * Aj[:, 0])
    J[:, :6, 4] = d * w2[:, None] * (_MJ * Ai[:, 1] + _MI * Aj[:, 1])
    J[:, :6, 5] = d * (_MJ * Ai[:, 2] + _MI * Aj[:, 2])
    J[:, :6, 6] = 2.0 * w[:, None] * upper
    Aq = A @ qc
    cr = np.cross(tK, p1)
    r[:, 6] = np.einsum("bi,bi->b", Aq, cr)
    J[:, 6, :3] = cr @ (E @ qc).T
    J[:, 6, 3:6] = d * cr + np.cross(p1[None, :], Aq)
    return r, J


def _feasibility_forms(basis):
    """Quadratic forms U1,U2,U12,V1,V2,V12 of the direction of n.

    With H(v) = sum_a v_a N_a, Ui collects the squared upper-part norms of
    columns i of H and Vi the squared bottom entries; the translation-free
    orthonormality equations read  w^2 mu^2 U + mu^2 V = {1, 1, 0}.
    """
    E = np.stack(basis)

    def sym(M):
        return 0.5 * (M + M.T)

    o = np.outer
    return np.stack([
        o(E[:, 0, 0], E[:, 0, 0]) + o(E[:, 1, 0], E[:, 1, 0]),
        o(E[:, 0, 1], E[:, 0, 1]) + o(E[:, 1, 1], E[:, 1, 1]),
        sym(o(E[:, 0, 0], E[:, 0, 1])) + sym(o(E[:, 1, 0], E[:, 1, 1])),
        o(E[:, 2, 0], E[:, 2, 0]),
        o(E[:, 2, 1], E[:, 2, 1]),
        sym(o(E[:, 2, 0], E[:, 2, 1])),
    ])


# exponent tables for ternary quadratics, cubics and quartics
_EXP2 = ((2, 0, 0), (0, 2, 0), (0, 0, 2), (1, 1, 0), (1, 0, 1), (0, 1, 1))
_EXP3 = ((3, 0, 0), (2, 1, 0), (2, 0, 1), (1, 2, 0), (1, 1, 1),
         (1, 0, 2), (0, 3, 0), (0, 2, 1), (0, 1, 2), (0, 0, 3))
_EXP3_IDX = {e: i for i, e in enumerate(_EXP3)}


def _quad_coeffs(M):
    return np.array([M[0, 0], M[1, 1], M[2, 2],
                     2 * M[0, 1], 2 * M[0, 2], 2 * M[1, 2]])


class _Quartic:
    """The feasibility quartic in expanded coefficient form.

    (V1 - V2) U12 - V12 (U1 - U2) is a product of quadratic forms, so the
    whole expression is one homogeneous quartic in the direction of n; its
    partials are cubics with 10 coefficients each and by homogeneity
    Q = (v . grad Q) / 4.  Evaluating monomials once and hitting them with
    small matmuls beats repeated tensor contractions by a wide margin on
    the batch sizes the curve scan produces.
    """

    __slots__ = ("c2", "c3")

    def __init__(self, basis):
        forms = _feasibility_forms(basis)
        self.c2 = np.stack([_quad_coeffs(M) for M in forms])
        q = self.c2
        fa, fb = q[3] - q[4], q[2]
        fc, fd = q[5], q[0] - q[1]
        c3 = np.zeros((3, 10))
        for i, ei in enumerate(_EXP2):
            for j, ej in enumerate(_EXP2):
                e4 = (ei[0] + ej[0], ei[1] + ej[1], ei[2] + ej[2])
                cij = fa[i] * fb[j] - fc[i] * fd[j]
                for ax in range(3):
                    if e4[ax]:
                        e3 = list(e4)
                        e3[ax] -= 1
                        c3[ax, _EXP3_IDX[tuple(e3)]] += e4[ax] * cij
        self.c3 = c3


def _monomials3(V):
    v0, v1, v2 = V[..., 0], V[..., 1], V[..., 2]
    v00, v11, v22 = v0 * v0, v1 * v1, v2 * v2
    return np.stack([v00 * v0, v00 * v1, v00 * v2, v0 * v11, v0 * v1 * v2,
                     v0 * v22, v11 * v1, v11 * v2, v1 * v22, v22 * v2],
                    axis=-1)


def _forms(F, V):
    """All six quadratic forms U1, U2, U12, V1, V2, V12 at directions V."""
    v0, v1, v2 = V[..., 0], V[..., 1], V[..., 2]
    mono = np.stack([v0 * v0, v1 * v1, v2 * v2, v0 * v1, v0 * v2, v1 * v2],
                    axis=-1)
    return mono @ F.c2.T


def _q4(F, V):
    """Quartic whose zero set on the sphere carries all solution directions.

    Eliminating w^2 between the translation-free orthonormality equations
    leaves (V1 - V2) U12 - V12 (U1 - U2) = 0.
    """
    dQ = _monomials3(V) @ F.c3.T
    return 0.25 * np.einsum("...i,...i->...", dQ, V)


def _q4_grad(F, V):
    dQ = _monomials3(V) @ F.c3.T
    return 0.25 * np.einsum("...i,...i->...", dQ, V), dQ


def _onto_curve(F, V, iters=2):
    """Newton-project unit vectors onto the quartic curve along its gradient."""
    for _ in range(iters):
        Q, dQ = _q4_grad(F, V)
        g = dQ - np.einsum("...i,...i->...", dQ, V)[..., None] * V
        gg = np.einsum("...i,...i->...", g, g)
        V = V - (Q / np.where(gg < 1e-300, np.inf, gg))[..., None] * g
        V = V / np.linalg.norm(V, axis=-1, keepdims=True)
    return V


def _slerp(A, B, t):
    d = np.clip(np.einsum("...i,...i->...", A, B), -1.0, 1.0)
    ang = np.arccos(d)[..., None]
    s = np.sin(ang)
    small = s[..., 0] < 1e-9
    wa = np.where(small[..., None], 1.0 - t, np.sin((1.0 - t) * ang) / np.where(s == 0, 1, s))
    wb = np.where(small[..., None], t, np.sin(t * ang) / np.where(s == 0, 1, s))
    out = wa * A + wb * B
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def _branch_values(V, E, F, d, qc, p1):
    """Epipolar values of both completion branches at curve directions V.

    At a direction on the quartic curve the scale mu and w^2 follow from the
    translation-free equations, the first two rotation columns are exact,
    and the third column is +-(c_x, c_y, w^2 c_z) for c = h1 x h2 (the upper
    entries of K r3 lose one factor of w, the bottom entry gains one).  The
    two resulting translations are tK+- = (+-a3 - h3)/d; sp and sm are the
    epipolar residuals of the two branches.

    sp and sm are polynomial in w^2, so they continue analytically through
    w^2 <= 0; sign tracking stays meaningful there (``usable``) even though
    only w^2 > 0 points complete to real solutions (``real``).  Roots
    hugging the w^2 = 0 boundary would otherwise hide from coarse sampling.
    """
    G = _forms(F, V)
    U1, U2, U12, V1, V2, V12 = (G[..., k] for k in range(6))
    w2 = np.where(np.abs(U12) >= np.abs(U1 - U2),
                  -V12 / np.where(U12 == 0, np.inf, U12),
                  (V2 - V1) / np.where(U1 == U2, np.inf, U1 - U2))
    mu2 = 1.0 / (w2 * U1 + V1)
    usable = (np.isfinite(w2) & np.isfinite(mu2)
              & (mu2 > 1e-16) & (mu2 < 1e16))
    real = usable & (w2 > 1e-14)
    w2s = np.where(usable, w2, 1.0)
    mu = np.sqrt(np.where(usable, mu2, 1.0))
    n0 = V * mu[..., None]
    H0 = np.einsum("...a,aij->...ij", n0, E)
    c = np.cross(H0[..., :, 0], H0[..., :, 1], axis=-1)
    a3 = np.stack([c[..., 0], c[..., 1], w2s * c[..., 2]], axis=-1)
    h3 = H0[..., :, 2]
    tKp = (a3 - h3) / d
    tKm = (-a3 - h3) / d
    base = qc[0] * H0[..., :, 0] + qc[1] * H0[..., :, 1]
    sp = np.einsum("...i,...i->...", base + a3, np.cross(tKp, p1))
    sm = np.einsum("...i,...i->...", base - a3, np.cross(tKm, p1))
    return sp, sm, usable, real, (n0, tKp, tKm, np.sqrt(np.maximum(w2s, 0.0)))


def _bisect_az(F, theta, lo, hi, ql, iters=12):
    """Refine an azimuth-edge sign crossing to a curve point.

    Coarse bisection narrows the bracket enough for the Newton projection
    to land on the correct fold; projection then does the precision work.
    """
    s_, c_ = np.sin(theta), np.cos(theta)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        qm = _q4(F, np.stack([s_ * np.cos(mid), s_ * np.sin(mid), c_], axis=-1))
        left = np.signbit(ql) != np.signbit(qm)
        hi = np.where(left, mid, hi)
        lo = np.where(left, lo, mid)
        ql = np.where(left, ql, qm)
    mid = 0.5 * (lo + hi)
    return _onto_curve(F, np.stack([s_ * np.cos(mid), s_ * np.sin(mid), c_], axis=-1), 2)


def _bisect_th(F, phi, lo, hi, ql, iters=12):
    """Refine a latitude-edge sign crossing to a curve point."""
    cp, sp_ = np.cos(phi), np.sin(phi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        qm = _q4(F, np.stack([np.sin(mid) * cp, np.sin(mid) * sp_, np.cos(mid)], axis=-1))
        left = np.signbit(ql) != np.signbit(qm)
        hi = np.where(left, mid, hi)
        lo = np.where(left, lo, mid)
        ql = np.where(left, ql, qm)
    mid = 0.5 * (lo + hi)
    return _onto_curve(F, np.stack([np.sin(mid) * cp, np.sin(mid) * sp_, np.cos(mid)], axis=-1), 2)


def _pair_cells(b, t, l, r, bI, tI, rI, lI):
    """Connect edge crossings through cells: one segment for plain cells,
    all six pairings for saddles (the sign scan discards spurious ones)."""
    segs_a = []
    segs_b = []
    nsides = b.astype(int) + t.astype(int) + l.astype(int) + r.astype(int)
    pairings = ((bI, tI), (bI, lI), (bI, rI), (tI, lI), (tI, rI), (lI, rI))
    for s1, s2 in pairings:
        m = (nsides == 2) & (s1 >= 0) & (s2 >= 0)
        if m.any():
            segs_a.append(s1[m])
            segs_b.append(s2[m])
    m4 = nsides == 4
    if m4.any():
        for s1, s2 in pairings:
            segs_a.append(s1[m4])
            segs_b.append(s2[m4])
    return segs_a, segs_b


def _refine_cells(F, thetas, phis, Q, ks, js, sub=8):
    """Sub-cell sign scan inside cells flagged as near-tangent.

    A fold grazing a cell edge crosses it twice, so the corner signs at grid
    resolution never see it; an 8x local grid recovers those arcs.  Returns
    (points, seg_a, seg_b) with segment indices local to the returned points.
    """
    nc = len(ks)
    dth = thetas[1] - thetas[0]
    dph = phis[1] - phis[0]
    frac = np.arange(sub + 1) / sub
    lt = thetas[ks][:, None] + dth * frac[None, :]
    lp = phis[js][:, None] + dph * frac[None, :]
    TT = np.broadcast_to(lt[:, :, None], (nc, sub + 1, sub + 1))
    PP = np.broadcast_to(lp[:, None, :], (nc, sub + 1, sub + 1))
    V = np.stack([np.sin(TT) * np.cos(PP), np.sin(TT) * np.sin(PP),
                  np.cos(TT)], axis=-1)
    Q2 = _q4(F, V.reshape(-1, 3))
    SB = np.signbit(Q2.reshape(nc, sub + 1, sub + 1))

    hor = SB[:, :, :-1] != SB[:, :, 1:]
    ver = SB[:, :-1, :] != SB[:, 1:, :]
    hc, hk, hj = np.nonzero(hor)
    vc, vk, vj = np.nonzero(ver)
    Qg = Q2.reshape(nc, sub + 1, sub + 1)
    Ph = (_bisect_az(F, TT[hc, hk, hj], PP[hc, hk, hj], PP[hc, hk, hj] + dph / sub,
                     Qg[hc, hk, hj], iters=8)
          if len(hc) else np.zeros((0, 3)))
    Pv = (_bisect_th(F, PP[vc, vk, vj], TT[vc, vk, vj], TT[vc, vk, vj] + dth / sub,
                     Qg[vc, vk, vj], iters=8)
          if len(vc) else np.zeros((0, 3)))
    hid = -np.ones((nc, sub + 1, sub), dtype=int)
    hid[hc, hk, hj] = np.arange(len(hc))
    vid = -np.ones((nc, sub, sub + 1), dtype=int)
    vid[vc, vk, vj] = np.arange(len(vc))

    b = hor[:, :-1, :]
    t = hor[:, 1:, :]
    l = ver[:, :, :-1]
    r = ver[:, :, 1:]
    bI = np.where(b, hid[:, :-1, :], -1)
    tI = np.where(t, hid[:, 1:, :], -1)
    lI = np.where(l, vid[:, :, :-1] + len(Ph), -1)
    rI = np.where(r, vid[:, :, 1:] + len(Ph), -1)
    segs_a, segs_b = _pair_cells(b, t, l, r, bI, tI, rI, lI)
    pts = np.concatenate([Ph, Pv])
    if not segs_a:
        return pts, np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return pts, np.concatenate(segs_a), np.concatenate(segs_b)


def _grid_segments(F):
    """Marching-squares pass: curve segments crossing a fixed spherical grid."""
    thetas = np.linspace(0.0035, np.pi - 0.0035, N_LAT)
    phis = np.linspace(0.0, 2 * np.pi, N_AZ + 1)[:-1]
    st, ct = np.sin(thetas), np.cos(thetas)
    V = np.empty((N_LAT, N_AZ, 3))
    V[..., 0] = st[:, None] * np.cos(phis)[None, :]
    V[..., 1] = st[:, None] * np.sin(phis)[None, :]
    V[..., 2] = ct[:, None]
    Q = _q4(F, V)
    SB = np.signbit(Q)

    # horizontal sides: (k, j) -- (k, j+1), with azimuth wrap
    hor = SB != np.roll(SB, -1, axis=1)
    hk, hj = np.nonzero(hor)
    # vertical sides: (k, j) -- (k+1, j)
    ver = SB[:-1] != SB[1:]
    vk, vj = np.nonzero(ver)

    dph = 2 * np.pi / N_AZ
    Ph = (_bisect_az(F, thetas[hk], phis[hj], phis[hj] + dph, Q[hk, hj])
          if len(hk) else np.zeros((0, 3)))
    Pv = (_bisect_th(F, phis[vj], thetas[vk], thetas[vk + 1], Q[vk, vj])
          if len(vk) else np.zeros((0, 3)))
    hid = -np.ones((N_LAT, N_AZ), dtype=int)
    hid[hk, hj] = np.arange(len(hk))
    vid = -np.ones((N_LAT - 1, N_AZ), dtype=int)
    vid[vk, vj] = np.arange(len(vk))

    # cells (k, j): bottom hor[k,j], top hor[k+1,j], left ver[k,j],
    # right ver[k, j+1 (wrapped)]
    jp1 = (np.arange(N_AZ) + 1) % N_AZ
    b = hor[:-1, :]
    t = hor[1:, :]
    l = ver
    r = ver[:, jp1]
    # vertical crossing indices sit past the horizontal block in pts
    pts = np.concatenate([Ph, Pv])
    bI = np.where(b, hid[:-1, :], -1)
    tI = np.where(t, hid[1:, :], -1)
    lI = np.where(l, vid + len(Ph), -1)
    rI = np.where(r, vid[:, jp1] + len(Ph), -1)
    segs_a, segs_b = _pair_cells(b, t, l, r, bI, tI, rI, lI)

    # corner signs cannot see a fold that enters and leaves a cell through
    # one edge, or a fold pair weaving between the grid lines; re-scan cells
    # that look grazed.  Two complementary flags: a corner far smaller in
    # magnitude than the rest of its cell, and a crossing-free cell whose
    # first-order distance to the curve (|Q| / |grad Q|) is well under the
    # cell size
    aQ = np.abs(Q)
    c00 = aQ[:-1, :]
    c01 = aQ[:-1, jp1]
    c10 = aQ[1:, :]
    c11 = aQ[1:, jp1]
    cmin = np.minimum(np.minimum(c00, c01), np.minimum(c10, c11))
    cmax = np.maximum(np.maximum(c00, c01), np.maximum(c10, c11))
    grazed = cmin < 0.02 * cmax

    dth = thetas[1] - thetas[0]
    gt_ = np.empty_like(Q)
    gt_[1:-1] = (Q[2:] - Q[:-2]) / (2 * dth)
    gt_[0] = (Q[1] - Q[0]) / dth
    gt_[-1] = (Q[-1] - Q[-2]) / dth
    ga_ = ((np.roll(Q, -1, axis=1) - np.roll(Q, 1, axis=1))
           / (2 * dph * np.maximum(st, 1e-3)[:, None]))
    delta = aQ / np.maximum(np.hypot(gt_, ga_), 1e-300)
    dmin = np.minimum(np.minimum(delta[:-1, :], delta[:-1, jp1]),
                      np.minimum(delta[1:, :], delta[1:, jp1]))
    has_cross = b | t | l | r
    grazed |= (~has_cross) & (dmin < 0.1 * dth)

    ks, js = np.nonzero(grazed)
    if len(ks):
        rp, ra, rb = _refine_cells(F, thetas, phis, Q, ks, js)
        if len(ra):
            segs_a.append(ra + len(pts))
            segs_b.append(rb + len(pts))
        pts = np.concatenate([pts, rp])

    if not segs_a:
        return pts, np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return pts, np.concatenate(segs_a), np.concatenate(segs_b)


def _trace_arcs(F, A, B, steps=56, budget=2.5, floor=1e-3):
    """March along the curve from A toward B in small tangent steps.

    Slerp interpolation shortcuts across switchbacks where the curve folds
    back on itself inside one grid cell; stepping along the local tangent
    (curve direction = v x grad Q4) follows the actual arc. The step is
    sized so the whole budget covers `budget` times the endpoint separation;
    rows stop once they come within a step of B. Callers pass each segment
    in both directions, which covers rows that run out of budget or start
    along the wrong tangent.
    """
    x = _onto_curve(F, A, 3)
    Bc = _onto_curve(F, B, 3)
    out = np.empty((len(A), steps + 1, 3))
    out[:, 0] = x
    geo = np.arccos(np.clip(np.sum(x * Bc, axis=1), -1.0, 1.0))
    h = np.maximum(geo, floor) * (budget / steps)
    live = np.ones(len(A), dtype=bool)
    tprev = None
    k = 0
    for k in range(steps):
        _, dQ = _q4_grad(F, x)
        g = dQ - np.sum(dQ * x, axis=1)[:, None] * x
        t = np.cross(x, g)
        nt = np.linalg.norm(t, axis=1, keepdims=True)
        t = t / np.maximum(nt, 1e-300)
        if tprev is None:
            ref = Bc - np.sum(Bc * x, axis=1)[:, None] * x
        else:
            ref = tprev
        sgn = np.sign(np.sum(t * ref, axis=1))
        t = t * np.where(sgn == 0.0, 1.0, sgn)[:, None]
        tprev = t
        xn = x + h[:, None] * t
        xn = xn / np.linalg.norm(xn, axis=1, keepdims=True)
        xn = _onto_curve(F, xn, 2)
        geo = np.arccos(np.clip(np.sum(xn * Bc, axis=1), -1.0, 1.0))
        live &= geo > 1.5 * h
        x = np.where(live[:, None], xn, x)
        out[:, k + 1] = x
        if not live.any():
            break
    return out[:, :k + 2]


def _complete(V, br, E, F, d, qc, p1):
    """Lift curve points to full solution vectors on the chosen branch."""
    if len(V) == 0:
        return np.zeros((0, 7))
    _, _, _, realm, (n0, tKp, tKm, w0) = _branch_values(V, E, F, d, qc, p1)
    tk = np.where((br > 0)[:, None], tKp, tKm)
    z = np.concatenate([n0, tk, w0[:, None]], axis=1)
    return z[realm & np.isfinite(z).all(axis=1) & (np.abs(z).max(axis=1) < 1e8)]


def _batch_solve(M, rhs):
    try:
        return np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.zeros_like(rhs)
        for i in range(len(M)):
            try:
                out[i] = np.linalg.solve(M[i], rhs[i])
            except np.linalg.LinAlgError:
                out[i] = 0.0
        return out


def _rel_residual_ok(z, Ns, d, qc, p1, tol=1e-8):
    """True where every equation's residual is tiny relative to the sizes of
    its own terms; scale-correct however large n, t_K or w get."""
    E = np.stack(Ns) if not isinstance(Ns, np.ndarray) else Ns
    n, tK, w = z[:, :3], z[:, 3:6], z[:, 6]
    A = np.einsum("ba,aij->bij", n, E)
    A[:, :, 2] += d * tK
    w2 = (w * w)[:, None]
    Ai = A[:, :, _PI]
    Aj = A[:, :, _PJ]
    r = (w2 * (Ai[:, 0] * Aj[:, 0] + Ai[:, 1] * Aj[:, 1])
         + Ai[:, 2] * Aj[:, 2] - _PD)
    s = (w2 * (np.abs(Ai[:, 0] * Aj[:, 0]) + np.abs(Ai[:, 1] * Aj[:, 1]))
         + np.abs(Ai[:, 2] * Aj[:, 2]) + 1.0)
    ok = (np.abs(r) < tol * s).all(axis=1)
    Aq = A @ qc
    cr = np.cross(tK, p1)
    r7 = np.einsum("bi,bi->b", Aq, cr)
    s7 = np.einsum("bi,bi->b", np.abs(Aq), np.abs(cr)) + 1e-300
    ok &= np.abs(r7) < tol * s7
    return ok


def _polish(z, E, d, qc, p1, iters=40):
    out = z.copy()
    out_cost = np.full(len(z), np.inf)
    idx = np.arange(len(z))
    lam = np.full(len(z), 1e-8)
    r = _residuals(z, E, d, qc, p1)
    cost = np.einsum("bi,bi->b", r, r)
    di = np.arange(7)
    it = 0
    while it < iters and len(z):
        stop = min(it + 25, iters)
        for _ in range(it, stop):
            r, J = _residuals_and_jac(z, E, d, qc, p1)
            JtJ = np.einsum("bki,bkj->bij", J, J)
            Jtr = np.einsum("bki,bk->bi", J, r)
            # damping scaled by the column norms keeps steps sensible when
            # the variables live on wildly different scales
            D = JtJ[:, di, di]
            D = np.maximum(D, 1e-12 * D.max(axis=1, keepdims=True))
            M = JtJ.copy()
            M[:, di, di] += lam[:, None] * D
            step = _batch_solve(M, -Jtr)
            z_new = z + step
            r_new = _residuals(z_new, E, d, qc, p1)
            cost_new = np.einsum("bi,bi->b", r_new, r_new)
            better = np.isfinite(cost_new) & (cost_new < cost)
            z = np.where(better[:, None], z_new, z)
            cost = np.where(better, cost_new, cost)
            lam = np.clip(np.where(better, lam * 0.3, lam * 4.0), 1e-15, 1e8)
        it = stop
        out[idx] = z
        out_cost[idx] = cost
        # keep iterating only rows that are neither converged, stuck,
        # diverging, nor merely treading water
        live = (~_rel_residual_ok(z, E, d, qc, p1, tol=1e-12)
                & (lam < 1e6) & np.isfinite(cost))
        # slow-but-genuine rows can plateau before their final plunge, but
        # they plateau quietly; junk treads water orders of magnitude louder
        if it > 100:
            live &= (cost < 0.25 * prev) | (cost < 1e-8)
        if not live.any():
            break
        z, cost, lam, idx = z[live], cost[live], lam[live], idx[live]
        prev = cost.copy()
    # the normal equations square the conditioning, which stalls the damped
    # steps when n grows to ~1e4; a few plain Newton steps on the square
    # system finish the job at full precision
    z, cost = out, out_cost
    for _ in range(2):
        r, J = _residuals_and_jac(z, E, d, qc, p1)
        step = _batch_solve(J, -r)
        z_new = z + step
        r_new = _residuals(z_new, E, d, qc, p1)
        cost_new = np.einsum("bi,bi->b", r_new, r_new)
        better = np.isfinite(cost_new) & (cost_new < cost)
        z = np.where(better[:, None], z_new, z)
        cost = np.where(better, cost_new, cost)
    return z, cost


def solve_h13f_system(ns: HKNullspace, frame: H13fFrame, full=False):
    """All real solutions of the canonical system, one per mirror pair.

    Returns nullspace coordinate vectors n (up to 12), each chosen so that
    its homography decomposes with a proper rotation; with ``full=True``
    returns (n, t_K, w) triples, w > 0.
    """
    with np.errstate(all="ignore"):
        return _solve_system(ns, frame, full)


def _solve_system(ns, frame, full):
    E = np.stack(ns.basis)
    F = _Quartic(ns.basis)
    d = frame.d
    qc = np.array([frame.r, 0.0, 1.0])
    p1 = np.array([frame.x1, frame.y1, 1.0])

    pts, sa, sb = _grid_segments(F)
    if len(sa) == 0:
        return []
    A = pts[sa]
    B = pts[sb]
    chain = [A]
    for k in range(1, SEG_SAMPLES):
        chain.append(_onto_curve(F, _slerp(A, B, k / float(SEG_SAMPLES)), 2))
    chain.append(B)
    C = np.stack(chain, axis=1)
    sp, sm, use, _, _ = _branch_values(C, E, F, d, qc, p1)

    # segments where the chain cannot be trusted: a branch-validity boundary
    # between samples (w^2 pole or w^2 <= 0 window cuts the segment, so a
    # root can hide in a sliver thinner than a chain step), or consecutive
    # samples collapsing onto one point because the projection refused to
    # advance past a switchback; those get the full arc tracer instead
    stuck = (np.sum(C[:, :-1] * C[:, 1:], axis=2) > 1.0 - 1e-10).any(axis=1)
    flagged = (use[:, :-1] != use[:, 1:]).any(axis=1) | stuck

    candA = []
    candB = []
    candbr = []

    def collect_flips(Cc, spc, smc, usec, mask=None):
        for br, s in ((+1, spc), (-1, smc)):
            flip = (usec[:, :-1] & usec[:, 1:]
                    & (np.signbit(s[:, :-1]) != np.signbit(s[:, 1:])))
            if mask is not None:
                flip &= mask
            ei, si = np.nonzero(flip)
            if len(ei):
                candA.append(Cc[ei, si])
                candB.append(Cc[ei, si + 1])
                candbr.append(np.full(len(ei), br))

    comp_V = []
    comp_br = []

    def collect_traced(T):
        nseg, nsmp = T.shape[:2]
        flat = T.reshape(-1, 3)
        spt, smt, uset, _, _ = _branch_values(flat, E, F, d, qc, p1)
        spt = spt.reshape(nseg, nsmp)
        smt = smt.reshape(nseg, nsmp)
        uset = uset.reshape(nseg, nsmp)
        for br, s in ((+1, spt), (-1, smt)):
            flip = (uset[:, :-1] & uset[:, 1:]
                    & (np.signbit(s[:, :-1]) != np.signbit(s[:, 1:])))
            ei, si = np.nonzero(flip)
            if len(ei):
                # trace samples sit close enough that the projected midpoint
                # alone is inside the root's polish basin
                vm = _onto_curve(F, _slerp(T[ei, si], T[ei, si + 1], 0.5), 2)
                comp_V.append(vm)
                comp_br.append(np.full(len(ei), br))
        return uset

    if flagged.any():
        Af, Bf = A[flagged], B[flagged]
        T = _trace_arcs(F, np.concatenate([Af, Bf]), np.concatenate([Bf, Af]))
        uset = collect_traced(T)
        # a usable sliver narrower than one trace step hides inside a
        # longer invalid run; re-trace each run with usable flanks at a
        # pitch fine enough to land inside the sliver
        gapsA = []
        gapsB = []
        for row in range(T.shape[0]):
            u = uset[row]
            starts = np.nonzero(u[:-1] & ~u[1:])[0]
            ends = np.nonzero(~u[:-1] & u[1:])[0] + 1
            for s0 in starts:
                after = ends[ends > s0]
                if len(after):
                    gapsA.append(T[row, s0])
                    gapsB.append(T[row, after[0]])
        if gapsA:
            Ga = np.asarray(gapsA)
            Gb = np.asarray(gapsB)
            Tg = _trace_arcs(F, np.concatenate([Ga, Gb]),
                             np.concatenate([Gb, Ga]),
                             budget=1.5, floor=5e-4)
            collect_traced(Tg)

    collect_flips(C, sp, sm, use, ~flagged[:, None])

    if candA:
        A0 = np.concatenate(candA)
        B0 = np.concatenate(candB)
        br = np.concatenate(candbr)
        spa, sma, _, _, _ = _branch_values(A0, E, F, d, qc, p1)
        sa_v = np.where(br > 0, spa, sma)
        for _ in range(10):
            Mv = _onto_curve(F, _slerp(A0, B0, 0.5), 2)
            spm, smm, _, _, _ = _branch_values(Mv, E, F, d, qc, p1)
            sm_v = np.where(br > 0, spm, smm)
            left = np.signbit(sa_v) != np.signbit(sm_v)
            B0 = np.where(left[:, None], Mv, B0)
            A0 = np.where(left[:, None], A0, Mv)
            sa_v = np.where(left, sa_v, sm_v)
        comp_V.append(_onto_curve(F, _slerp(A0, B0, 0.5), 3))
        comp_br.append(br)

    if not comp_V:
        return []
    # refined cells overlap their parent cell, so the same root arrives a
    # few times; collapse near-identical curve points before polishing
    Vc = np.concatenate(comp_V)
    brc = np.concatenate(comp_br)
    key = np.concatenate([np.round(Vc, 4), brc[:, None]], axis=1)
    _, ui = np.unique(key, axis=0, return_index=True)
    z = _complete(Vc[ui], brc[ui], E, F, d, qc, p1)
    if not len(z):
        return []
    z = _polish(z, E, d, qc, p1, iters=25)[0]
    z = z[_rel_residual_ok(z, E, d, qc, p1)]

    out = []
    for q in z:
        n, tq, w = q[:3].copy(), q[3:6].copy(), q[6]
        if not (1e-8 < w < 1e8):
            continue
        Am = np.einsum("a,aij->ij", n, E)
        Am[:, 2] += d * tq
        if np.linalg.det(np.diag([w, w, 1.0]) @ Am) < 0:
            n, tq = -n, -tq
        cand = np.concatenate([n, tq, [w]])
        s = max(1.0, float(np.abs(cand).max()))
        if not any(np.abs(cand - qq).max() < 1e-6 * s for qq in out):
            out.append(cand)
    out.sort(key=lambda q: (round(q[6], 9), round(q[0], 6), round(q[1], 6)))
    if full:
        return [(q[:3].copy(), q[3:6].copy(), float(q[6])) for q in out]
    return [q[:3].copy() for q in out]


def recover_focal_and_t(HK, frame: H13fFrame):
    """Closed-form w = 1/f and t_K = K t for a solved homography H_K.

    w^2 comes from the three translation-free orthonormality equations by
    least squares; t_K follows from completing the rotation's third column
    on the proper (det +1) branch.
    """
    HK = np.asarray(HK, dtype=float)
    u = np.array([HK[0, 0]**2 + HK[1, 0]**2,
                  HK[0, 1]**2 + HK[1, 1]**2,
                  HK[0, 0]*HK[0, 1] + HK[1, 0]*HK[1, 1]])
    v = np.array([HK[2, 0]**2, HK[2, 1]**2, HK[2, 0]*HK[2, 1]])
    rhs = np.array([1.0, 1.0, 0.0]) - v
    denom = u @ u
    if denom < 1e-24:
        raise DegenerateInputError("focal length unobservable from this H_K")
    w2 = (u @ rhs) / denom
    if not (w2 > 1e-24):
        raise DegenerateInputError("no real positive focal for this H_K")
    w = float(np.sqrt(w2))
    r1 = np.array([w * HK[0, 0], w * HK[1, 0], HK[2, 0]])
    r2 = np.array([w * HK[0, 1], w * HK[1, 1], HK[2, 1]])
    r3 = np.cross(r1, r2)
    a3 = np.array([r3[0] / w, r3[1] / w, r3[2]])
    t_K = (a3 - HK[:, 2]) / frame.d
    return w, t_K


def pose_from_homography(H, d, f=1.0):
    """Rotation and translation from a correctly scaled calibrated homography.

    H must equal R - t N^T with N = [0, 0, d]: its first two columns are
    then unit-norm and orthogonal; the third combines the rotation's third
    column with the translation.
    """
    H = np.asarray(H, dtype=float)
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    if (abs(np.linalg.norm(h1) - 1.0) > 1e-3
            or abs(np.linalg.norm(h2) - 1.0) > 1e-3
            or abs(h1 @ h2) > 1e-3):
        raise DegenerateInputError(
            "not a valid plane homography: first two columns must be "
            "orthonormal at this scale")
    r3 = np.cross(h1, h2)
    R = np.column_stack([h1, h2, r3])
    U, _, Vt = np.linalg.svd(R)
    R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
    t = (r3 - h3) / d
    return PoseWithFocal(R=R, t=t, f=f)


def solve(corrs: HybridCorrespondences):
    """End-to-end solver: one pose per solution of the canonical system."""
    m, n_count, _ = corrs.configuration()
    if (m, n_count) != (1, 3):
        raise ValueError(
            f"this solver needs 1 2D-2D and 3 2D-3D correspondences, "
            f"got (m, n) = ({m}, {n_count})")
    frame, canon = canonicalize_h13f(corrs)
    ns = build_hk_nullspace(canon.threed)

    poses = []
    for n, _tk, _w in solve_h13f_system(ns, frame, full=True):
        HK = ns.matrix(n)
        try:
            w, t_K = recover_focal_and_t(HK, frame)
        except DegenerateInputError:
            continue
        Kinv = np.diag([w, w, 1.0])
        try:
            cpose = pose_from_homography(Kinv @ HK, frame.d)
        except DegenerateInputError:
            continue
        R, t, f = frame.pose_from_canonical(cpose.R, Kinv @ t_K, 1.0 / w)
        if f <= 0:
            continue
        poses.append(recover_depths(corrs, PoseWithFocal(R=R, t=t, f=f)))
    poses.sort(key=lambda p: p.f)
    return poses


register(SolverEntry(
    name="h13f",
    solve=solve,
    sample_spec=SampleSpec(cam_groups=(1,), n=3),
    description="1 2D-2D + 3 2D-3D via plane homography, up to 12 solutions",
))
