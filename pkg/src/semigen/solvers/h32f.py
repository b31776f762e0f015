"""Minimal solver for 3 2D-2D + 2 2D-3D correspondences.

The two 3D points pin down most of the gauge freedom: the rig frame is
translated, rotated and scaled so the second point sits at the origin and
the first at [0, 0, 1], and the query pixel of the origin point is moved
onto [1, 0, 1] by an in-plane rotation plus an isotropic pixel rescale
(both commute with the unknown K = diag(f, f, 1)).  Projecting the origin
then forces K t = a5 * [1, 0, 1] for a single unknown scale a5, which
removes the translation entirely.

The remaining unknowns are packed into an unnormalized quaternion q whose
squared norm carries the focal length: with Q(q) the standard homogeneous
rotation matrix and s = |q|^2, the matrix M = [Q1; Q2; s*Q3] equals
s^2 * K R for f = 1/s, so every constraint becomes polynomial in (q, a)
with a = s^2 * a5.  The two cross-product rows of the [0,0,1] point and
the three generalized epipolar constraints give five equations in five
unknowns, each even in q (so solutions pair up as +-q) and linear in a.

Backend: a damped Gauss-Newton iteration from a fixed block of 500
deterministic starts, run first in single precision to throw away the
majority of starts that never settle into a basin, then continued in
double precision with per-window harvesting of converged rows, Newton
polishing, a per-equation relative residual gate, and +-q folding.
Distinct surviving roots map to poses through f = 1/s, R = Q(q)/s,
t = (a/s^2) * [s, 0, 1] and the gauge inverse.  No randomness at solve
time: the start block is fixed at import.
"""

from dataclasses import dataclass

import numpy as np

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
    DegenerateInputError,
)

N_STARTS = 500

# canonical pixel direction of the origin 3D point
_U = np.array([1.0, 0.0, 1.0])


@dataclass(frozen=True)
class H32fFrame:
    """Gauge transforms taking the input into the canonical frame.

    Canonical rig coordinates are X_c = scale * R_g @ (X - t_shift), which
    maps the second 2D-3D point to the origin and the first to [0, 0, 1].
    Query pixels are rotated in-plane by R_q and scaled by pixel_scale,
    which maps the origin point's pixel to [1, 0, 1]; both operations
    commute with K, so the canonical camera is still diag(f_c, f_c, 1)
    with f_c = pixel_scale * f.
    """
    R_g: np.ndarray
    t_shift: np.ndarray
    scale: float
    R_q: np.ndarray
    pixel_scale: float

    def to_canonical_point(self, X):
        return self.scale * (self.R_g @ (np.asarray(X, dtype=float) - self.t_shift))

    def to_canonical_pixel(self, p):
        v = self.R_q @ np.asarray(p, dtype=float)
        return np.array([self.pixel_scale * v[0], self.pixel_scale * v[1], 1.0])

    def pose_from_canonical(self, R_c, t_c, f_c):
        """Map a canonical-frame pose back to the input frame."""
        R = self.R_q.T @ R_c @ self.R_g
        t = self.R_q.T @ np.asarray(t_c) / self.scale - R @ self.t_shift
        f = f_c / self.pixel_scale
        return R, t, f


# the in-plane part of the paper trail: one fixed, full-turn random angle
# applied to the rig frame about its z axis; it breaks any accidental
# alignment between the rig data and the canonical axes
_RIG_SPIN = float(np.random.default_rng(52_03_14).uniform(0.0, 2.0 * np.pi))


def _z_rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def canonicalize_h32f(corrs: HybridCorrespondences):
    """Move the problem into the canonical gauge.

    The first 2D-3D correspondence becomes the [0, 0, 1] point, the second
    the origin.  Returns (frame, canonical correspondences).  Raises
    DegenerateInputError for coincident 3D points or an origin-point pixel
    at the principal point (no in-plane rotation can reach [1, 0, 1]).
    """
    X4 = np.asarray(corrs.threed[0].X, dtype=float)
    X5 = np.asarray(corrs.threed[1].X, dtype=float)
    axis = X4 - X5
    nd = np.linalg.norm(axis)
    if nd < 1e-9 * max(1.0, np.linalg.norm(X4), np.linalg.norm(X5)):
        raise DegenerateInputError("the two 3D points (nearly) coincide")
    u = axis / nd
    e = np.eye(3)[int(np.argmin(np.abs(u)))]
    x_axis = e - (e @ u) * u
    x_axis /= np.linalg.norm(x_axis)
    R_g = _z_rotation(_RIG_SPIN) @ np.vstack([x_axis, np.cross(u, x_axis), u])
    scale = 1.0 / nd

    p5 = np.asarray(corrs.threed[1].p, dtype=float)
    rho = np.hypot(p5[0], p5[1])
    if rho < 1e-9:
        raise DegenerateInputError(
            "origin point's query pixel sits at the principal point")
    R_q = _z_rotation(-np.arctan2(p5[1], p5[0]))
    frame = H32fFrame(R_g=R_g, t_shift=X5, scale=scale,
                      R_q=R_q, pixel_scale=1.0 / rho)

    canon = HybridCorrespondences(
        twod=[Corr2D2D(p=frame.to_canonical_pixel(c.p),
                       q=frame.R_g @ np.asarray(c.q, dtype=float),
                       tg=frame.to_canonical_point(c.tg),
                       cam_index=c.cam_index)
              for c in corrs.twod],
        threed=[Corr2D3D(p=frame.to_canonical_pixel(corrs.threed[0].p),
                         X=[0.0, 0.0, 1.0]),
                Corr2D3D(p=_U, X=[0.0, 0.0, 0.0])])
    return frame, canon


@dataclass(frozen=True)
class H32fSystem:
    """Data of the five-equation square system in (q, a).

    p4: canonical pixel of the [0, 0, 1] point; P, D, G: per-2D-2D pixel,
    ray direction and camera center (rows).  CE stacks the per-equation
    coefficient tables over the even quaternion-monomial basis (rows 0-4
    the a-free parts, rows 5-9 the a-linear parts), CO the matching
    q-gradient tables over the odd basis; scl holds per-equation
    normalizers so the Gauss-Newton cost weighs all equations alike.
    """
    p4: np.ndarray
    P: np.ndarray
    D: np.ndarray
    G: np.ndarray
    CE: np.ndarray
    CO: np.ndarray
    scl: np.ndarray


# ---------------------------------------------------------------------------
# Monomial bookkeeping.  Every residual is even in q and linear in a, so the
# q-dependence lives in the 130 even monomials of degree <= 6 and each
# q-partial in the 80 odd monomials of degree <= 5.  The structural part of
# the coefficient tables (which products of M entries occur, with which
# exponents) is data-independent and precomputed here once; per-instance
# tables are then a handful of small matrix products.
# ---------------------------------------------------------------------------

def _exps_of_degree(total):
    out = []
    for i in range(total + 1):
        for j in range(total - i + 1):
            for k in range(total - i - j + 1):
                out.append((i, j, k, total - i - j - k))
    return out


_EVEN_EXPS = (_exps_of_degree(0) + _exps_of_degree(2)
              + _exps_of_degree(4) + _exps_of_degree(6))
_ODD_EXPS = _exps_of_degree(1) + _exps_of_degree(3) + _exps_of_degree(5)
_EIDX = {e: i for i, e in enumerate(_EVEN_EXPS)}
_OIDX = {e: i for i, e in enumerate(_ODD_EXPS)}
_N_EVEN = len(_EVEN_EXPS)      # 130
_N_ODD = len(_ODD_EXPS)        # 80


def _tab(*terms):
    """A small polynomial as {exponent4: coeff}."""
    out = {}
    for coef, exp in terms:
        out[exp] = out.get(exp, 0) + coef
    return out


def _tmul(ta, tb):
    out = {}
    for ea, ca in ta.items():
        for eb, cb in tb.items():
            e = (ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2], ea[3] + eb[3])
            out[e] = out.get(e, 0) + ca * cb
    return out


def _even_vec(tab):
    v = np.zeros(_N_EVEN)
    for e, c in tab.items():
        v[_EIDX[e]] = c
    return v


def _build_structure():
    W, X, Y, Z = (1, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1)

    def sq(e):
        return tuple(2 * c for c in e)

    def m2(ea, eb):
        return tuple(a + b for a, b in zip(ea, eb))

    Qt = [[None] * 3 for _ in range(3)]
    Qt[0][0] = _tab((1, sq(W)), (1, sq(X)), (-1, sq(Y)), (-1, sq(Z)))
    Qt[0][1] = _tab((2, m2(X, Y)), (-2, m2(W, Z)))
    Qt[0][2] = _tab((2, m2(X, Z)), (2, m2(W, Y)))
    Qt[1][0] = _tab((2, m2(X, Y)), (2, m2(W, Z)))
    Qt[1][1] = _tab((1, sq(W)), (-1, sq(X)), (1, sq(Y)), (-1, sq(Z)))
    Qt[1][2] = _tab((2, m2(Y, Z)), (-2, m2(W, X)))
    Qt[2][0] = _tab((2, m2(X, Z)), (-2, m2(W, Y)))
    Qt[2][1] = _tab((2, m2(Y, Z)), (2, m2(W, X)))
    Qt[2][2] = _tab((1, sq(W)), (-1, sq(X)), (-1, sq(Y)), (1, sq(Z)))
    s_tab = _tab((1, sq(W)), (1, sq(X)), (1, sq(Y)), (1, sq(Z)))

    Mt = [[Qt[0][j] for j in range(3)], [Qt[1][j] for j in range(3)],
          [_tmul(s_tab, Qt[2][j]) for j in range(3)]]
    M_vec = np.stack([np.stack([_even_vec(Mt[i][j]) for j in range(3)])
                      for i in range(3)])

    pairs = [(b, g) for b in range(3) for g in range(3) if b != g]
    prod_vec = np.zeros((len(pairs), 3, 3, _N_EVEN))
    for k, (b, g) in enumerate(pairs):
        for j in range(3):
            for l in range(3):
                prod_vec[k, j, l] = _even_vec(_tmul(Mt[b][j], Mt[g][l]))

    deriv = np.zeros((4, _N_EVEN, _N_ODD))
    for ei, e in enumerate(_EVEN_EXPS):
        for k in range(4):
            if e[k]:
                d = list(e)
                d[k] -= 1
                deriv[k, ei, _OIDX[tuple(d)]] = e[k]

    # index programs for building the monomial batches incrementally
    deg2 = _exps_of_degree(2)
    deg4 = _exps_of_degree(4)
    deg6 = _exps_of_degree(6)
    deg3 = _exps_of_degree(3)
    deg5 = _exps_of_degree(5)
    i2 = {e: i for i, e in enumerate(deg2)}
    i4 = {e: i for i, e in enumerate(deg4)}

    def first_sub(e, table):
        for eb, idx in table.items():
            if all(c >= cb for c, cb in zip(e, eb)):
                return idx, tuple(c - cb for c, cb in zip(e, eb))
        raise AssertionError

    p2a, p2b = [], []
    for e in deg2:
        k = next(i for i, c in enumerate(e) if c)
        p2a.append(k)
        r = list(e)
        r[k] -= 1
        p2b.append(next(i for i, c in enumerate(r) if c))
    u4a, u4b = [], []
    for e in deg4:
        ia, rem = first_sub(e, i2)
        u4a.append(ia)
        u4b.append(i2[rem])
    u6a, u6b = [], []
    for e in deg6:
        ia, rem = first_sub(e, i4)
        u6a.append(ia)
        u6b.append(i2[rem])
    o1 = [next(i for i, c in enumerate(e) if c) for e in _exps_of_degree(1)]
    o3a, o3b = [], []
    for e in deg3:
        k = next(i for i, c in enumerate(e) if c)
        r = list(e)
        r[k] -= 1
        o3a.append(i2[tuple(r)])
        o3b.append(k)
    o5a, o5b = [], []
    for e in deg5:
        k = next(i for i, c in enumerate(e) if c)
        r = list(e)
        r[k] -= 1
        o5a.append(i4[tuple(r)])
        o5b.append(k)
    prog = tuple(np.array(v) for v in
                 (p2a, p2b, u4a, u4b, u6a, u6b, o1, o3a, o3b, o5a, o5b))
    return M_vec, pairs, prod_vec, deriv, prog


_M_VEC, _PAIRS6, _PROD_VEC, _DERIV, _PROG = _build_structure()

# flattened views so the per-instance tables come out of plain matrix products
_PROD_FLAT = np.ascontiguousarray(_PROD_VEC.reshape(54, _N_EVEN))
_DERIV_FLAT = np.ascontiguousarray(
    _DERIV.transpose(1, 0, 2).reshape(_N_EVEN, 4 * _N_ODD))
_MV_BYJ = np.ascontiguousarray(_M_VEC.transpose(1, 0, 2).reshape(3, 3 * _N_EVEN))


_SCRATCH = {}


def _buffers(B, dtype=np.float64):
    """Reused work arrays, sliced out of power-of-two sized backing buffers.

    Batch sizes shrink every window of the polish loop; per-size buffers
    would reallocate megabytes per solve, and large per-iteration
    temporaries thrash the allocator's mmap path.  BLAS takes the strided
    views as-is (one contiguous dimension is enough).
    """
    cap = max(8, 1 << int(B - 1).bit_length())
    key = (cap, np.dtype(dtype).char)
    full = _SCRATCH.get(key)
    if full is None:
        full = dict(
            me=np.empty((_N_EVEN, cap), dtype),
            mo=np.empty((_N_ODD, cap), dtype),
            ga=np.empty((35, cap), dtype), gb=np.empty((35, cap), dtype),
            gc=np.empty((84, cap), dtype), gd=np.empty((84, cap), dtype),
            ge=np.empty((56, cap), dtype), gf=np.empty((56, cap), dtype),
            v10=np.empty((10, cap), dtype), g40=np.empty((40, cap), dtype),
            J=np.empty((cap, 5, 5), dtype), Ja=np.empty((cap, 5, 6), dtype),
            G6=np.empty((cap, 5, 6), dtype))
        full["me"][0] = 1.0
        _SCRATCH[key] = full
    if B == cap:
        return full
    return {k: (v[:, :B] if v.shape[0] != cap else v[:B])
            for k, v in full.items()}


def _even_parts(qT, bufs):
    # variables-first layout: row gathers on contiguous arrays
    p2a, p2b, u4a, u4b, u6a, u6b = _PROG[:6]
    me = bufs["me"]
    me2, me4 = me[1:11], me[11:46]
    np.multiply(qT[p2a], qT[p2b], out=me2)
    np.take(me2, u4a, axis=0, out=bufs["ga"])
    np.take(me2, u4b, axis=0, out=bufs["gb"])
    np.multiply(bufs["ga"], bufs["gb"], out=me4)
    np.take(me4, u6a, axis=0, out=bufs["gc"])
    np.take(me2, u6b, axis=0, out=bufs["gd"])
    np.multiply(bufs["gc"], bufs["gd"], out=me[46:])
    return me, me2, me4


def _monomials(qT, bufs):
    """Even (130,B) and odd (80,B) monomial batches of the quaternion."""
    o1, o3a, o3b, o5a, o5b = _PROG[6:]
    me, me2, me4 = _even_parts(qT, bufs)
    mo = bufs["mo"]
    mo[:4] = qT[o1]
    np.multiply(me2[o3a], qT[o3b], out=mo[4:24])
    np.take(me4, o5a, axis=0, out=bufs["ge"])
    np.take(qT, o5b, axis=0, out=bufs["gf"])
    np.multiply(bufs["ge"], bufs["gf"], out=mo[24:])
    return me, mo


def _quat_mats(q):
    """Batched M = [Q1; Q2; s*Q3] and its q-gradient.

    Returns (M, dM, s) with M: (B,3,3), dM: (B,3,3,4), s: (B,).
    """
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    s = w * w + x * x + y * y + z * z
    B = len(q)
    Q = np.empty((B, 3, 3))
    Q[:, 0, 0] = w * w + x * x - y * y - z * z
    Q[:, 0, 1] = 2.0 * (x * y - w * z)
    Q[:, 0, 2] = 2.0 * (x * z + w * y)
    Q[:, 1, 0] = 2.0 * (x * y + w * z)
    Q[:, 1, 1] = w * w - x * x + y * y - z * z
    Q[:, 1, 2] = 2.0 * (y * z - w * x)
    Q[:, 2, 0] = 2.0 * (x * z - w * y)
    Q[:, 2, 1] = 2.0 * (y * z + w * x)
    Q[:, 2, 2] = w * w - x * x - y * y + z * z

    dQ = np.empty((B, 3, 3, 4))
    dQ[:, 0, 0] = 2.0 * np.stack([w, x, -y, -z], axis=1)
    dQ[:, 0, 1] = 2.0 * np.stack([-z, y, x, -w], axis=1)
    dQ[:, 0, 2] = 2.0 * np.stack([y, z, w, x], axis=1)
    dQ[:, 1, 0] = 2.0 * np.stack([z, y, x, w], axis=1)
    dQ[:, 1, 1] = 2.0 * np.stack([w, -x, y, -z], axis=1)
    dQ[:, 1, 2] = 2.0 * np.stack([-x, -w, z, y], axis=1)
    dQ[:, 2, 0] = 2.0 * np.stack([-y, z, -w, x], axis=1)
    dQ[:, 2, 1] = 2.0 * np.stack([x, w, z, y], axis=1)
    dQ[:, 2, 2] = 2.0 * np.stack([w, -x, -y, z], axis=1)

    ds = 2.0 * q
    M = Q.copy()
    M[:, 2] *= s[:, None, None][:, 0]
    dM = dQ.copy()
    dM[:, 2] = s[:, None, None] * dQ[:, 2] + Q[:, 2, :, None] * ds[:, None, :]
    return M, dM, s


def _resid_ce(CE, z, bufs):
    a = z[:, 4]
    me = _even_parts(np.ascontiguousarray(z[:, :4].T), bufs)[0]
    v = np.matmul(CE, me, out=bufs["v10"])
    return (v[:5] + a[None, :] * v[5:]).T


def _residuals(sys_: H32fSystem, z):
    return _resid_ce(sys_.CE, z, _buffers(len(z), z.dtype))


def _residuals_and_jac(sys_: H32fSystem, z):
    a = z[:, 4]
    bufs = _buffers(len(z), z.dtype)
    me, mo = _monomials(np.ascontiguousarray(z[:, :4].T), bufs)
    v = np.matmul(sys_.CE, me, out=bufs["v10"])
    rB = v[5:]                              # (5,B)
    r = (v[:5] + a[None, :] * rB).T
    g = np.matmul(sys_.CO, mo, out=bufs["g40"])
    J = bufs["J"]
    J[:, :, :4] = (g[:20] + a[None, :] * g[20:]).T.reshape(-1, 5, 4)
    J[:, :, 4] = rB.T
    return r, J


def _aug_normal(CE, CO, z, bufs):
    """Cost and Gauss-Newton normal data in one pass.

    Builds the augmented jacobian [J | r] once and returns G = J^T [J | r],
    so G[:, :, :5] is J^T J and G[:, :, 5] is J^T r; one batched matmul
    instead of two.
    """
    a = z[:, 4]
    me, mo = _monomials(np.ascontiguousarray(z[:, :4].T), bufs)
    v = np.matmul(CE, me, out=bufs["v10"])
    rB = v[5:]
    r = (v[:5] + a[None, :] * rB).T
    g = np.matmul(CO, mo, out=bufs["g40"])
    Ja = bufs["Ja"]
    Ja[:, :, :4] = (g[:20] + a[None, :] * g[20:]).T.reshape(-1, 5, 4)
    Ja[:, :, 4] = rB.T
    Ja[:, :, 5] = r
    G = np.matmul(Ja.transpose(0, 2, 1)[:, :5], Ja, out=bufs["G6"])
    return np.einsum("bi,bi->b", r, r), G


def _term_scales(sys_: H32fSystem, z):
    """Magnitude of each equation's constituent terms, for relative gating."""
    q, a = z[:, :4], z[:, 4]
    M, _, _ = _quat_mats(q)
    v4 = M[:, :, 2] + a[:, None] * _U
    g1, g2 = sys_.p4[0], sys_.p4[1]
    sc = np.empty((len(z), 5))
    sc[:, 0] = np.abs(g2 * v4[:, 2]) + np.abs(v4[:, 1]) + np.abs(a)
    sc[:, 1] = np.abs(v4[:, 0]) + np.abs(g1 * v4[:, 2]) + np.abs(a)
    b = np.einsum("bij,kj->bki", M, sys_.D)
    c = np.einsum("bij,kj->bki", M, sys_.G) + a[:, None, None] * _U
    nb = np.linalg.norm(b, axis=2)
    nc = np.linalg.norm(c, axis=2)
    npx = np.linalg.norm(sys_.P, axis=1)
    sc[:, 2:] = npx[None, :] * nb * nc
    return sc


def _coeff_tables(p4, P, D, G):
    """Per-equation coefficient tables (a-free and a-linear) over the even
    monomial basis, assembled from the precomputed structural tables."""
    g1, g2 = p4[0], p4[1]
    CA = np.empty((5, _N_EVEN))
    CB = np.zeros((5, _N_EVEN))
    # point equations: v4 = M e3 + a u with u = (1, 0, 1)
    CA[0] = g2 * _M_VEC[2, 2] - _M_VEC[1, 2]
    CA[1] = _M_VEC[0, 2] - g1 * _M_VEC[2, 2]
    CB[0, 0] = g2
    CB[1, 0] = 1.0 - g1
    # ray equations: p . ((M d) x (M g + a u)); the a-free part is quadratic
    # in the entries of M, the a-part linear via p . ((M d) x u)
    Wm = np.zeros((3, 3, 3))
    Wm[:, 0, 1] = P[:, 2]
    Wm[:, 0, 2] = -P[:, 1]
    Wm[:, 1, 0] = -P[:, 2]
    Wm[:, 1, 2] = P[:, 0]
    Wm[:, 2, 0] = P[:, 1]
    Wm[:, 2, 1] = -P[:, 0]
    Wp = Wm[:, [b for b, g in _PAIRS6], [g for b, g in _PAIRS6]]   # (3,6)
    wt = Wp[:, :, None, None] * D[:, None, :, None] * G[:, None, None, :]
    CA[2:] = wt.reshape(3, -1) @ _PROD_FLAT
    T = (D @ _MV_BYJ).reshape(3, 3, _N_EVEN)     # T[k, i] = D[k] @ _M_VEC[i]
    CB[2:] = ((P[:, 0] - P[:, 2])[:, None] * T[:, 1]
              + P[:, 1][:, None] * (T[:, 2] - T[:, 0]))
    return CA, CB


def build_h32f_system(canon: HybridCorrespondences) -> H32fSystem:
    """Assemble the square system's coefficient tables from canonical input."""
    p4 = np.asarray(canon.threed[0].p, dtype=float)
    P = np.array([c.p for c in canon.twod], dtype=float)
    D = np.array([c.q for c in canon.twod], dtype=float)
    G = np.array([c.tg for c in canon.twod], dtype=float)
    CA, CB = _coeff_tables(p4, P, D, G)
    CE = np.vstack([CA, CB])
    # normalize equations by their typical size over the start block, so no
    # single correspondence dominates the Gauss-Newton cost
    _, r0 = _start_block(CE)
    scl = np.median(np.abs(r0), axis=0)
    scl = np.maximum(scl, 1e-9 * scl.max() + 1e-300)
    CE /= np.concatenate([scl, scl])[:, None]
    CO = np.ascontiguousarray((CE @ _DERIV_FLAT).reshape(4 * 10, _N_ODD))
    return H32fSystem(p4=p4, P=P, D=D, G=G, CE=CE, CO=CO, scl=scl)


_SEEDS = None
_SEED_ME = None


def _start_block(CE):
    """Deterministic Gauss-Newton starts and their residuals.

    Fixed quaternion directions with log-spread norms (|q|^2 spans focals
    from ~0.1 to ~400 canonical units), with the scale unknown seeded by its
    per-start linear least squares fit (every equation is linear in a).  The
    even monomials of the starts never change, so they are cached and each
    call is a single matrix product against the coefficient table.
    """
    global _SEEDS, _SEED_ME
    if _SEEDS is None:
        rng = np.random.default_rng(32_05_20)
        qd = rng.standard_normal((N_STARTS, 4))
        qd /= np.linalg.norm(qd, axis=1, keepdims=True)
        rad = np.exp(rng.uniform(np.log(0.05), np.log(3.0), size=N_STARTS))
        _SEEDS = qd * rad[:, None]
        bufs = _buffers(N_STARTS)
        _SEED_ME = _even_parts(
            np.ascontiguousarray(_SEEDS.T), bufs)[0].copy()
    v = CE @ _SEED_ME
    rA, rB = v[:5].T, v[5:].T
    denom = np.einsum("bi,bi->b", rB, rB)
    a = -np.einsum("bi,bi->b", rA, rB) / np.maximum(denom, 1e-300)
    z = np.zeros((N_STARTS, 5))
    z[:, :4] = _SEEDS
    z[:, 4] = a
    return z, rA + a[:, None] * rB


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


def _chol5_solve(A, b):
    """Batched 5x5 SPD solve, fully unrolled Cholesky.

    Beats LAPACK dispatch up from a few hundred systems; pivots are clamped
    away from zero so indefinite rows come out as garbage steps that the
    accept/reject test then discards, instead of raising.
    """
    eps = 1e-300
    L00 = np.sqrt(np.maximum(A[:, 0, 0], eps))
    L10 = A[:, 1, 0] / L00
    L20 = A[:, 2, 0] / L00
    L30 = A[:, 3, 0] / L00
    L40 = A[:, 4, 0] / L00
    L11 = np.sqrt(np.maximum(A[:, 1, 1] - L10 * L10, eps))
    L21 = (A[:, 2, 1] - L20 * L10) / L11
    L31 = (A[:, 3, 1] - L30 * L10) / L11
    L41 = (A[:, 4, 1] - L40 * L10) / L11
    L22 = np.sqrt(np.maximum(A[:, 2, 2] - L20 * L20 - L21 * L21, eps))
    L32 = (A[:, 3, 2] - L30 * L20 - L31 * L21) / L22
    L42 = (A[:, 4, 2] - L40 * L20 - L41 * L21) / L22
    L33 = np.sqrt(np.maximum(
        A[:, 3, 3] - L30 * L30 - L31 * L31 - L32 * L32, eps))
    L43 = (A[:, 4, 3] - L40 * L30 - L41 * L31 - L42 * L32) / L33
    L44 = np.sqrt(np.maximum(
        A[:, 4, 4] - L40 * L40 - L41 * L41 - L42 * L42 - L43 * L43, eps))
    y0 = b[:, 0] / L00
    y1 = (b[:, 1] - L10 * y0) / L11
    y2 = (b[:, 2] - L20 * y0 - L21 * y1) / L22
    y3 = (b[:, 3] - L30 * y0 - L31 * y1 - L32 * y2) / L33
    y4 = (b[:, 4] - L40 * y0 - L41 * y1 - L42 * y2 - L43 * y3) / L44
    x4 = y4 / L44
    x3 = (y3 - L43 * x4) / L33
    x2 = (y2 - L32 * x3 - L42 * x4) / L22
    x1 = (y1 - L21 * x2 - L31 * x3 - L41 * x4) / L11
    x0 = (y0 - L10 * x1 - L20 * x2 - L30 * x3 - L40 * x4) / L00
    return np.stack([x0, x1, x2, x3, x4], axis=1)


_DI = np.arange(5)


def _damped_step(JtJ, Jtr, lam):
    """One damped-normal-equation step batch, precision-aware.

    Single-precision batches upcast into the double Cholesky: squaring the
    jacobian squares its conditioning, and float32 backsubstitution falls
    apart around cond 3e3, which curved valleys exceed routinely.  Double
    batches take the Cholesky when large and LAPACK LU when small (LU's
    batched dispatch wins below a couple hundred rows).
    """
    Dd = JtJ[:, _DI, _DI]
    Dd = np.maximum(Dd, 1e-12 * Dd.max(axis=1, keepdims=True))
    Mm = JtJ.copy()
    Mm[:, _DI, _DI] += lam[:, None] * Dd
    if Mm.dtype == np.float32:
        return _chol5_solve(Mm.astype(np.float64),
                            -Jtr.astype(np.float64)).astype(np.float32)
    if len(Mm) >= 150:
        return _chol5_solve(Mm, -Jtr)
    return _batch_solve(Mm, -Jtr)


def _fold_sign(z):
    # fold the +-q symmetry: first significant quaternion entry positive
    qa = np.abs(z[:, :4])
    lead = np.argmax(qa > 1e-8 * qa.max(axis=1, keepdims=True), axis=1)
    sgn = np.sign(z[np.arange(len(z)), lead])
    z = z.copy()
    z[:, :4] *= sgn[:, None]
    return z


def _rel_residual_ok(sys_: H32fSystem, z, tol=1e-8):
    r = _residuals(sys_, z) * sys_.scl
    sc = _term_scales(sys_, z)
    return (np.abs(r) <= tol * (sc + 1e-300)).all(axis=1)


def _coarse_sweep(sys_: H32fSystem, iters=14, cut=1e-3, harvest=20, window=5,
                  park32=1e-5, stall=0.9):
    """Single-precision damped sweep over the full start block.

    Accept/reject Gauss-Newton with multiplicative damping; by the cut
    iteration every basin that ends in a root has pulled its best rows
    below the cost cut, while rows still above it are wandering between
    basins.  The harvest phase keeps crawling in single precision, parking
    rows at park32 per window: that threshold sits seven decades above the
    float32 cost noise floor (residual noise ~1e-6 squared), so basin
    membership is already decided there and the costly double-precision
    descent is reserved for rows that have not committed.  Survivors are
    promoted to double precision together with their damping state
    (clipped into a restartable band).
    """
    CE32 = sys_.CE.astype(np.float32)
    CO32 = sys_.CO.astype(np.float32)
    z = _start_block(sys_.CE)[0].astype(np.float32)
    bufs = _buffers(len(z), np.float32)
    lam = np.full(len(z), 1e-6, np.float32)
    cost, G = _aug_normal(CE32, CO32, z, bufs)
    JtJ = G[:, :, :5].copy()
    Jtr = G[:, :, 5].copy()
    for _ in range(iters):
        step = _damped_step(JtJ, Jtr, lam)
        z_p = z + step
        cost_p, G_p = _aug_normal(CE32, CO32, z_p, bufs)
        acc = np.isfinite(cost_p) & (cost_p < cost)
        z = np.where(acc[:, None], z_p, z)
        cost = np.where(acc, cost_p, cost)
        JtJ = np.where(acc[:, None, None], G_p[:, :, :5], JtJ)
        Jtr = np.where(acc[:, None], G_p[:, :, 5], Jtr)
        lam = np.clip(np.where(acc, lam * np.float32(0.3),
                               lam * np.float32(5.0)),
                      np.float32(1e-14), np.float32(1e8)).astype(np.float32)
    keep = np.isfinite(cost) & (cost < cut) & (np.abs(z).max(axis=1) < 1e8)
    z, cost, lam = z[keep], cost[keep], lam[keep]
    JtJ, Jtr = JtJ[keep], Jtr[keep]
    lam = np.clip(lam, np.float32(1e-14), np.float32(1e2))
    parked_z, parked_c = [], []
    prevc = cost.copy()
    it = 0
    while it < harvest and len(z):
        bufs = _buffers(len(z), np.float32)
        stop = min(it + window, harvest)
        for _ in range(it, stop):
            step = _damped_step(JtJ, Jtr, lam)
            z_p = z + step
            cost_p, G_p = _aug_normal(CE32, CO32, z_p, bufs)
            acc = np.isfinite(cost_p) & (cost_p < cost)
            z = np.where(acc[:, None], z_p, z)
            cost = np.where(acc, cost_p, cost)
            JtJ = np.where(acc[:, None, None], G_p[:, :, :5], JtJ)
            Jtr = np.where(acc[:, None], G_p[:, :, 5], Jtr)
            lam = np.clip(np.where(acc, lam * np.float32(0.3),
                                   lam * np.float32(5.0)),
                          np.float32(1e-14), np.float32(1e8)).astype(np.float32)
        it = stop
        fin = np.isfinite(cost) & (np.abs(z).max(axis=1) < 1e8)
        pocket = fin & (cost <= park32)
        dead = ~fin | (lam >= 1e6)
        live = fin & ~pocket & ~dead & (cost < stall * prevc)
        park = fin & ~live
        if park.any():
            parked_z.append(z[park].astype(np.float64))
            parked_c.append(cost[park].astype(np.float64))
        z, cost, lam = z[live], cost[live], lam[live]
        JtJ, Jtr = JtJ[live], Jtr[live]
        prevc = cost.copy()
    pz = (np.concatenate(parked_z) if parked_z else np.empty((0, 5)))
    pc = (np.concatenate(parked_c) if parked_c else np.empty(0))
    return (z.astype(np.float64),
            np.clip(lam.astype(np.float64), 1e-10, 1e2), pz, pc)


def _windowed_polish(sys_: H32fSystem, z, lam, iters=31, cap=36, window=5,
                     park_c=1e-13, stall=0.9):
    """Double-precision crawl with per-window harvesting.

    Rows reaching the Newton pocket (cost <= park_c) are parked for the
    finisher: descending further in the crawl is wasted work, plain Newton
    from there converges quadratically.  Rows whose cost stopped
    contracting (by the stall factor per window, tightened to 0.7x past
    the base budget) are parked as-is, and rows that went non-finite or
    rode the damping to its ceiling are dropped.  The extension window
    past the base budget exists for slow curved-valley basins: the
    single-precision sweep hands rows over about 4x farther from the root
    than a double sweep would, and the slowest basins are still a few
    contracting windows short at the base budget; whatever remains at the
    cap is parked and left to the finisher's line-searched Newton.
    """
    if not len(z):
        return z, np.empty(0)
    bufs = _buffers(len(z))
    cost, G = _aug_normal(sys_.CE, sys_.CO, z, bufs)
    JtJ = G[:, :, :5].copy()
    Jtr = G[:, :, 5].copy()
    prevc = cost.copy()
    parked_z, parked_c = [], []
    it = 0
    while it < cap and len(z):
        stop = min(it + window, cap)
        for _ in range(it, stop):
            step = _damped_step(JtJ, Jtr, lam)
            z_p = z + step
            cost_p, G_p = _aug_normal(sys_.CE, sys_.CO, z_p, bufs)
            acc = np.isfinite(cost_p) & (cost_p < cost)
            z = np.where(acc[:, None], z_p, z)
            cost = np.where(acc, cost_p, cost)
            JtJ = np.where(acc[:, None, None], G_p[:, :, :5], JtJ)
            Jtr = np.where(acc[:, None], G_p[:, :, 5], Jtr)
            lam = np.clip(np.where(acc, lam * 0.3, lam * 5.0), 1e-14, 1e8)
        it = stop
        fin = np.isfinite(cost) & (np.abs(z).max(axis=1) < 1e8)
        pocket = fin & (cost <= park_c)
        dead = ~fin | (lam >= 1e6)
        live = fin & ~pocket & ~dead
        if it >= iters:
            live &= cost < 0.7 * prevc
        else:
            live &= cost < stall * prevc
        park = fin & ~live
        if park.any():
            parked_z.append(z[park])
            parked_c.append(cost[park])
        if not live.any():
            z = z[:0]
            break
        z, cost, lam = z[live], cost[live], lam[live]
        JtJ, Jtr = JtJ[live], Jtr[live]
        prevc = cost.copy()
        bufs = _buffers(len(z))
    if len(z):
        parked_z.append(z)
        parked_c.append(cost)
    if not parked_z:
        return np.empty((0, 5)), np.empty(0)
    z = np.concatenate(parked_z)
    cost = np.concatenate(parked_c)
    # trim the finisher pool: most parked rows are extra copies of the same
    # basin, pocket-parked a little apart (spread stays under ~2e-4 while
    # distinct roots keep a relative separation around 1e-2), so a greedy
    # best-cost-first sweep at 3e-4 leaves one row per basin
    if len(z) > 1:
        order = np.argsort(cost, kind="stable")
        z, cost = z[order], cost[order]
        zf = _fold_sign(z)
        sc = np.maximum(1.0, np.abs(zf).max(axis=1))
        d = np.abs(zf[:, None, :] - zf[None, :, :]).max(axis=2)
        close = d < 3e-4 * np.maximum(sc[:, None], sc[None, :])
        keep = np.ones(len(z), bool)
        for k in range(len(z)):
            if keep[k]:
                keep[k + 1:] &= ~close[k, k + 1:]
        z, cost = z[keep], cost[keep]
    return z, cost


def _finish_roots(sys_: H32fSystem, z, cost, newton=2, line_search=4):
    """Newton polish, acceptance gates, +-q folding and dedup.

    Two plain Newton steps finish everything already in a quadratic
    pocket; the line-searched rounds then rescue plateau rows (tiny cost,
    salvageable but Newton-overshooting basins) without disturbing rows
    that already converged.
    """
    for _ in range(newton):
        if not len(z):
            break
        r, J = _residuals_and_jac(sys_, z)
        step = _batch_solve(J, -r)
        z_new = z + step
        r_new = _residuals(sys_, z_new)
        cost_new = np.einsum("bi,bi->b", r_new, r_new)
        better = np.isfinite(cost_new) & (cost_new < cost)
        z = np.where(better[:, None], z_new, z)
        cost = np.where(better, cost_new, cost)
    for _ in range(line_search):
        if not len(z):
            break
        hot = np.isfinite(cost) & (cost > 1e-26)
        if not hot.any():
            break
        zh, ch = z[hot], cost[hot]
        r, J = _residuals_and_jac(sys_, zh)
        step = _batch_solve(J, -r)
        accepted = np.zeros(len(zh), bool)
        frac = 1.0
        for _ in range(5):
            z_new = zh + frac * step
            r_new = _residuals(sys_, z_new)
            cost_new = np.einsum("bi,bi->b", r_new, r_new)
            better = ~accepted & np.isfinite(cost_new) & (cost_new < ch)
            zh = np.where(better[:, None], z_new, zh)
            ch = np.where(better, cost_new, ch)
            accepted |= better
            if accepted.all():
                break
            frac *= 0.5
        z[hot], cost[hot] = zh, ch

    z = z[np.isfinite(z).all(axis=1)]
    if not len(z):
        return z
    s = np.einsum("bi,bi->b", z[:, :4], z[:, :4])
    z = z[s > 1e-10 * np.maximum(1.0, np.abs(z[:, 4]))]
    if not len(z):
        return z
    z = z[_rel_residual_ok(sys_, z)]
    if not len(z):
        return z
    z = _fold_sign(z)
    # greedy dedup on the folded chart, best-cost representative per cluster
    r = _residuals(sys_, z)
    order = np.argsort(np.einsum("bi,bi->b", r, r), kind="stable")
    z = z[order]
    sc = np.maximum(1.0, np.abs(z).max(axis=1))
    d = np.abs(z[:, None, :] - z[None, :, :]).max(axis=2)
    close = d < 1e-6 * np.maximum(sc[:, None], sc[None, :])
    keep = np.ones(len(z), bool)
    for k in range(len(z)):
        if keep[k]:
            keep[k + 1:] &= ~close[k, k + 1:]
    roots = list(z[keep])
    roots.sort(key=lambda c: (round(float(c[0]), 9), round(float(c[1]), 9),
                              round(float(c[4]), 9)))
    return np.array(roots)


def _oracle_roots(sys_: H32fSystem):
    """All distinct converged roots of the square system, one per +-q pair."""
    z, lam = _coarse_sweep(sys_)
    if not len(z):
        return np.empty((0, 5))
    z, cost = _windowed_polish(sys_, z, lam)
    return _finish_roots(sys_, z, cost)


def solve_h32f_system(sys_: H32fSystem):
    """All real solutions (q, a), one representative per +-q mirror pair."""
    with np.errstate(all="ignore"):
        return _oracle_roots(sys_)


def solve_h32f(corrs: HybridCorrespondences, backend="oracle"):
    """End-to-end solver: one pose per solution of the canonical system."""
    if backend != "oracle":
        raise ValueError(f"unknown backend {backend!r}; only 'oracle' is built in")
    m, n_count, _ = corrs.configuration()
    if (m, n_count) != (3, 2):
        raise ValueError(
            f"this solver needs 3 2D-2D and 2 2D-3D correspondences, "
            f"got (m, n) = ({m}, {n_count})")
    frame, canon = canonicalize_h32f(corrs)
    sys_ = build_h32f_system(canon)

    poses = []
    for root in solve_h32f_system(sys_):
        q, a = root[:4], root[4]
        s = float(q @ q)
        if not (1e-8 < s < 1e8):
            continue
        M = _quat_mats(q[None, :])[0][0]
        R_c = M.copy()
        R_c[2] /= s          # M = [Q1; Q2; s Q3], R = Q / s
        R_c /= s
        al5 = a / (s * s)
        t_c = al5 * np.array([s, 0.0, 1.0])
        R, t, f = frame.pose_from_canonical(R_c, t_c, 1.0 / s)
        if not (np.isfinite(f) and f > 0 and np.isfinite(t).all()):
            continue
        poses.append(recover_depths(corrs, PoseWithFocal(R=R, t=t, f=f)))
    poses.sort(key=lambda p: p.f)
    return poses


def solve(corrs: HybridCorrespondences):
    return solve_h32f(corrs, backend="oracle")


register(SolverEntry(
    name="h32f",
    solve=solve,
    sample_spec=SampleSpec(cam_groups=(2, 1), n=2),
    description="3 2D-2D + 2 2D-3D via quaternion-focal coupling, up to 26 solutions",
))
