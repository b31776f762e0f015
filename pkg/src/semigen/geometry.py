"""Core geometric types and constraint residuals.

Conventions used throughout the library:

* The rig frame is the reference frame.  A rig camera ``G_i`` with rotation
  ``R_i`` and center ``c_i`` maps its local coordinates to the rig frame via
  ``X_rig = R_i @ X_local + c_i``; the ray through a rig pixel therefore
  emanates from ``c_i`` with direction ``R_i @ K_i^-1 @ g``.
* The query pose ``(R, t, f)`` maps rig coordinates into the query camera
  frame, ``X_query = R @ X_rig + t``, and the query intrinsic matrix is
  ``K = diag(f, f, 1)`` (principal point at the origin, square pixels).
* A 2D-2D correspondence pairs a query pixel ``p`` with a rig ray ``(q, tg)``;
  eliminating the two unknown depths gives the scalar constraint

      p^T [K R q]_x (K R tg + K t) = 0.

* A 2D-3D correspondence pairs a query pixel ``p`` with a rig-frame point
  ``X``; eliminating the unknown depth gives the 3-vector (rank 2) constraint

      [p]_x (K R X + K t) = 0.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tolerances
from .validation import check_finite_array, check_rotation, check_positive


def _freeze(arr):
    a = np.array(arr, dtype=float)
    a.setflags(write=False)
    return a


def skew(v):
    """Skew-symmetric cross-product matrix: skew(a) @ b == np.cross(a, b)."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def intrinsic_matrix(f):
    """K = diag(f, f, 1) for a unit-aspect camera with centered principal point."""
    return np.diag([float(f), float(f), 1.0])


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PinholeCamera:
    """Calibrated rig camera: local-to-rig rotation, center, and focal length.

    ``rotation`` and ``translation`` align the camera's local frame with the
    rig frame (``X_rig = rotation @ X_local + translation``), so
    ``translation`` is the camera center expressed in rig coordinates.
    """

    rotation: np.ndarray
    translation: np.ndarray
    focal: float

    def __post_init__(self):
        object.__setattr__(self, "rotation", _freeze(check_rotation(self.rotation)))
        object.__setattr__(self, "translation",
                           _freeze(check_finite_array(self.translation, (3,), "translation")))
        object.__setattr__(self, "focal", check_positive(self.focal, "focal"))


@dataclass(frozen=True)
class GeneralizedCamera:
    """A calibrated rig: an ordered collection of pinhole cameras."""

    cameras: tuple

    def __post_init__(self):
        cams = tuple(self.cameras)
        if not cams:
            raise ValueError("GeneralizedCamera needs at least one camera")
        for c in cams:
            if not isinstance(c, PinholeCamera):
                raise ValueError("GeneralizedCamera entries must be PinholeCamera")
        object.__setattr__(self, "cameras", cams)

    def __len__(self):
        return len(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]


@dataclass(frozen=True)
class Corr2D2D:
    """Query pixel vs. rig ray.

    p: homogeneous query pixel [x, y, 1].
    q: ray direction in the rig frame (non-zero, not necessarily unit).
    tg: center of the observing rig camera, in rig coordinates.
    cam_index: index of the observing rig camera.
    """

    p: np.ndarray
    q: np.ndarray
    tg: np.ndarray
    cam_index: int = 0

    def __post_init__(self):
        p = check_finite_array(self.p, (3,), "p")
        if abs(p[2] - 1.0) > 1e-9:
            raise ValueError("query pixel p must be homogeneous with p[2] == 1")
        q = check_finite_array(self.q, (3,), "q")
        if np.linalg.norm(q) < 1e-300:
            raise ValueError("rig ray q must be non-zero")
        object.__setattr__(self, "p", _freeze(p))
        object.__setattr__(self, "q", _freeze(q))
        object.__setattr__(self, "tg", _freeze(check_finite_array(self.tg, (3,), "tg")))
        object.__setattr__(self, "cam_index", int(self.cam_index))


@dataclass(frozen=True)
class Corr2D3D:
    """Query pixel vs. 3D point in rig coordinates."""

    p: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        p = check_finite_array(self.p, (3,), "p")
        if abs(p[2] - 1.0) > 1e-9:
            raise ValueError("query pixel p must be homogeneous with p[2] == 1")
        object.__setattr__(self, "p", _freeze(p))
        object.__setattr__(self, "X", _freeze(check_finite_array(self.X, (3,), "X")))


@dataclass(frozen=True)
class HybridCorrespondences:
    """A mixed set of 2D-2D and 2D-3D correspondences."""

    twod: tuple = ()
    threed: tuple = ()

    def __post_init__(self):
        a = tuple(self.twod)
        b = tuple(self.threed)
        for c in a:
            if not isinstance(c, Corr2D2D):
                raise ValueError("twod entries must be Corr2D2D")
        for c in b:
            if not isinstance(c, Corr2D3D):
                raise ValueError("threed entries must be Corr2D3D")
        object.__setattr__(self, "twod", a)
        object.__setattr__(self, "threed", b)

    def configuration(self):
        """Return (m, n, k): counts of 2D-2D and 2D-3D correspondences and the
        largest number of 2D-2D correspondences sharing one rig camera."""
        m = len(self.twod)
        n = len(self.threed)
        if m == 0:
            return m, n, 0
        counts = {}
        for c in self.twod:
            counts[c.cam_index] = counts.get(c.cam_index, 0) + 1
        return m, n, max(counts.values())


@dataclass(frozen=True)
class PoseWithFocal:
    """Estimated query pose and focal length, with optional depth diagnostics.

    depths_2d3d: per-correspondence query-side depth (alpha), or None.
    depths_2d2d: per-correspondence (alpha, beta) pairs, or None.
    indeterminate: boolean mask marking correspondences whose depths could not
        be recovered reliably (near-parallel rays); aligned with the
        concatenation [2d2d, 2d3d].
    """

    R: np.ndarray
    t: np.ndarray
    f: float
    depths_2d3d: Optional[np.ndarray] = None
    depths_2d2d: Optional[np.ndarray] = None
    indeterminate: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "R", _freeze(check_rotation(self.R, name="pose rotation")))
        object.__setattr__(self, "t", _freeze(check_finite_array(self.t, (3,), "pose translation")))
        object.__setattr__(self, "f", check_positive(self.f, "pose focal"))
        for name in ("depths_2d3d", "depths_2d2d", "indeterminate"):
            val = getattr(self, name)
            if val is not None:
                arr = np.array(val)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @property
    def K(self):
        return intrinsic_matrix(self.f)

    def cheirality_ok(self):
        """True when every determinate recovered depth is positive.

        Returns None when no depths were recovered.
        """
        vals = []
        if self.depths_2d2d is not None and self.depths_2d2d.size:
            vals.append(np.asarray(self.depths_2d2d).ravel())
        if self.depths_2d3d is not None and self.depths_2d3d.size:
            vals.append(np.asarray(self.depths_2d3d).ravel())
        if not vals:
            return None
        return bool(np.all(np.concatenate(vals) > 0))


# ---------------------------------------------------------------------------
# Rays and residuals
# ---------------------------------------------------------------------------

def ray_from_pixel(pixel, camera: PinholeCamera):
    """Rig-frame ray direction of a rig-camera pixel: R_i @ K_i^-1 @ g."""
    g = check_finite_array(pixel, (3,), "pixel")
    f = camera.focal
    local = np.array([g[0] / f, g[1] / f, g[2]])
    return camera.rotation @ local


def residual_2d2d(corr: Corr2D2D, pose: PoseWithFocal):
    """Scalar epipolar-type residual p^T [K R q]_x (K R tg + K t)."""
    K = pose.K
    KR = K @ pose.R
    v = KR @ corr.q
    u = KR @ corr.tg + K @ pose.t
    return float(corr.p @ np.cross(v, u))


def residual_2d3d(corr: Corr2D3D, pose: PoseWithFocal):
    """Rank-2 projection residual [p]_x (K R X + K t), returned as a 3-vector."""
    K = pose.K
    w = K @ (pose.R @ corr.X + pose.t)
    return np.cross(corr.p, w)


def normalized_residual_2d2d(corr: Corr2D2D, pose: PoseWithFocal):
    """Scale-invariant magnitude of the 2D-2D residual in [0, 1].

    |p . (v x u)| / (|p| |v| |u|) where v = K R q and u = K R tg + K t; zero
    exactly when the constraint holds regardless of pixel or scene units.
    """
    K = pose.K
    KR = K @ pose.R
    v = KR @ corr.q
    u = KR @ corr.tg + K @ pose.t
    denom = np.linalg.norm(corr.p) * np.linalg.norm(v) * np.linalg.norm(u)
    if denom < 1e-300:
        return 0.0
    return abs(float(corr.p @ np.cross(v, u))) / denom


def normalized_residual_2d3d(corr: Corr2D3D, pose: PoseWithFocal):
    """Scale-invariant magnitude |p x w| / (|p| |w|) of the 2D-3D residual."""
    w = pose.K @ (pose.R @ corr.X + pose.t)
    denom = np.linalg.norm(corr.p) * np.linalg.norm(w)
    if denom < 1e-300:
        return 0.0
    return float(np.linalg.norm(np.cross(corr.p, w))) / denom


def recover_depths(corrs: HybridCorrespondences, pose: PoseWithFocal):
    """Recover per-correspondence depths for a hypothesized pose.

    For 2D-3D, solves alpha * K^-1 p = R X + t in least squares.  For 2D-2D,
    solves the 3x2 system [K^-1 p, -R q] @ [alpha, beta]^T = R tg + t.
    Correspondences whose system is ill-conditioned (singular value ratio
    below ``tolerances.CONDITIONING_TOL``) are flagged indeterminate rather
    than rejected.

    Returns:
        A new PoseWithFocal carrying depths_2d2d, depths_2d3d and the
        indeterminate mask.
    """
    R, t, f = pose.R, pose.t, pose.f
    Kinv_diag = np.array([1.0 / f, 1.0 / f, 1.0])

    flags = []
    d22 = np.zeros((len(corrs.twod), 2))
    for i, c in enumerate(corrs.twod):
        A = np.column_stack([Kinv_diag * c.p, -(R @ c.q)])
        b = R @ c.tg + t
        sv = np.linalg.svd(A, compute_uv=False)
        if sv[-1] < tolerances.CONDITIONING_TOL * sv[0]:
            d22[i] = np.nan
            flags.append(True)
        else:
            d22[i] = np.linalg.lstsq(A, b, rcond=None)[0]
            flags.append(False)

    d23 = np.zeros(len(corrs.threed))
    for i, c in enumerate(corrs.threed):
        ray = Kinv_diag * c.p
        w = R @ c.X + t
        nn = ray @ ray
        if nn < tolerances.CONDITIONING_TOL:
            d23[i] = np.nan
            flags.append(True)
        else:
            d23[i] = (ray @ w) / nn
            flags.append(False)

    return PoseWithFocal(
        R=R, t=t, f=f,
        depths_2d3d=d23 if d23.size else None,
        depths_2d2d=d22 if d22.size else None,
        indeterminate=np.array(flags, dtype=bool) if flags else None,
    )


# ---------------------------------------------------------------------------
# Error metrics
# ---------------------------------------------------------------------------

def rotation_error_deg(Ra, Rb):
    """Geodesic angle in degrees between two rotations.

    Uses atan2 of the skew part against the trace part; unlike the plain
    arccos form this keeps full precision for very small angles.
    """
    Ra = np.asarray(Ra, dtype=float)
    Rb = np.asarray(Rb, dtype=float)
    D = Ra @ Rb.T
    c = (np.trace(D) - 1.0) / 2.0
    w = 0.5 * np.array([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0],
                        D[1, 0] - D[0, 1]])
    return float(np.degrees(np.arctan2(np.linalg.norm(w), c)))


def translation_error(ta, tb):
    """Euclidean distance between two translations."""
    return float(np.linalg.norm(np.asarray(ta, dtype=float) - np.asarray(tb, dtype=float)))


def focal_rel_error(fa, fb):
    """|fa - fb| / fb (fb is treated as the reference value)."""
    return abs(float(fa) - float(fb)) / abs(float(fb))
