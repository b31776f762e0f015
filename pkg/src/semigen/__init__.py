"""Semi-generalized pose estimation for a partially calibrated query camera.

Estimates the pose (rotation, translation) and unknown focal length of a
pinhole query camera relative to a calibrated multi-camera rig, from hybrid
sets of 2D-2D (pixel vs. rig ray) and 2D-3D (pixel vs. rig point)
correspondences.  Minimal solvers for the three seven-constraint
configurations are in :mod:`semigen.solvers`; robust estimation on outlier
contaminated data is in :mod:`semigen.ransac`.
"""

from .geometry import (
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

__version__ = "0.1.0"

__all__ = [
    "PinholeCamera",
    "GeneralizedCamera",
    "Corr2D2D",
    "Corr2D3D",
    "HybridCorrespondences",
    "PoseWithFocal",
    "skew",
    "intrinsic_matrix",
    "ray_from_pixel",
    "residual_2d2d",
    "residual_2d3d",
    "normalized_residual_2d2d",
    "normalized_residual_2d3d",
    "recover_depths",
    "rotation_error_deg",
    "translation_error",
    "focal_rel_error",
    "RansacConfig",
    "RansacResult",
    "run_ransac",
    "HybridPoseRansac",
    "__version__",
]


def __getattr__(name):
    # RANSAC and the estimator wrapper pull in the solver stack; import them
    # on first use so the lightweight geometry types stay cheap to import.
    if name in ("RansacConfig", "RansacResult", "run_ransac"):
        from . import ransac
        return getattr(ransac, name)
    if name == "HybridPoseRansac":
        from .estimator import HybridPoseRansac
        return HybridPoseRansac
    raise AttributeError(f"module 'semigen' has no attribute {name!r}")
