"""Input validation helpers.

Small check functions in the spirit of sklearn's ``check_array``; they raise
``ValueError`` with a readable message instead of letting malformed input
propagate into linear algebra.
"""

import numpy as np

from . import tolerances


def check_finite_array(a, shape=None, name="array"):
    """Coerce to a float64 ndarray, enforce shape and finiteness.

    Args:
        a: array-like input.
        shape: optional exact shape tuple to enforce.
        name: label used in error messages.

    Returns:
        A float64 ndarray copy of the input.
    """
    arr = np.asarray(a, dtype=float)
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_rotation(R, tol=None, name="rotation"):
    """Validate that R is a proper rotation matrix.

    Checks R @ R.T == I and det R == +1 to ``tol`` (defaults to
    ``tolerances.ROTATION_TOL`` scaled by a small safety factor).
    """
    R = check_finite_array(R, (3, 3), name)
    if tol is None:
        tol = 100.0 * tolerances.ROTATION_TOL
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"{name} is not orthonormal (max deviation {err:.3e})")
    if np.linalg.det(R) < 0:
        raise ValueError(f"{name} has negative determinant (improper rotation)")
    return R


def check_homogeneous_pixel(p, name="pixel"):
    """Validate a homogeneous image point of the form [x, y, 1]."""
    p = check_finite_array(p, (3,), name)
    if abs(p[2] - 1.0) > 1e-12:
        raise ValueError(f"{name} must be normalized to last coordinate 1, got {p[2]!r}")
    return p


def check_positive(value, name="value"):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return value


def as_unit(v, name="vector"):
    """Return v / ||v||, rejecting near-zero vectors."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n < 1e-300:
        raise ValueError(f"{name} has zero norm")
    return v / n
