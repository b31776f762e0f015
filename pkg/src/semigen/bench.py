"""Synthetic scenes and the noise-robustness benchmark harness.

Scenes consist of 3D points drawn uniformly from a cube of side 10 centered
at the origin, a rig of look-at cameras at random distances in [15, 25], and
a query camera placed by one of three motion models:

* ``random``: an independent look-at camera;
* ``forward``: a look-at camera displaced along its own optical axis;
* ``sideways``: displaced perpendicular to its optical axis.

Pixels are kept in pixel units with the principal point already subtracted,
so image bounds are [-500, 500]^2 for a 1000 x 1000 px sensor.

Noise is reproducible across sweep levels: every scene stores unit-variance
noise draws at generation time, and ``add_noise`` only scales them.  This
keeps error curves comparable point-for-point across sigma levels.
"""

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import (
    PinholeCamera,
    GeneralizedCamera,
    Corr2D2D,
    Corr2D3D,
    HybridCorrespondences,
    PoseWithFocal,
    rotation_error_deg,
    translation_error,
    focal_rel_error,
)

MOTIONS = ("random", "forward", "sideways")

# sigma_3d sweep of the standard experiment, in % of point depth
DEFAULT_SIGMA_LEVELS = (0.0, 0.5, 1.0, 2.0)


@dataclass(frozen=True)
class SceneConfig:
    num_scenes: int = 5000
    num_points: int = 100
    cube_side: float = 10.0
    num_rig_cams: int = 5
    distance_range: tuple = (15.0, 25.0)
    image_size: float = 1000.0
    focal_range: tuple = (800.0, 1500.0)
    motion: str = "random"
    # forward/sideways displacement as a fraction of the camera's distance
    displacement_range: tuple = (0.10, 0.20)
    noise_3d_pct: float = 0.0
    noise_2d_px: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.cube_side <= 0:
            raise ValueError("cube_side must be positive")
        lo, hi = self.distance_range
        if not (0 < lo <= hi):
            raise ValueError("distance_range must be positive and ordered")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}")
        if self.num_points < 7:
            raise ValueError("need at least 7 points per scene")


@dataclass
class SceneInstance:
    """One synthetic scene: rig, ground truth, point tracks, noise state.

    Clean geometry is stored as arrays (points, per-camera pixels); the
    correspondence views below build typed objects on demand.  ``apply_noise``
    fills the ``noisy_*`` arrays; before that they alias the clean data.
    """

    index: int
    rig: GeneralizedCamera
    ground_truth: PoseWithFocal
    points: np.ndarray          # (N,3) rig-frame positions
    pixels_p: np.ndarray        # (N,2) query pixels, principal point at 0
    pixels_rig: np.ndarray      # (N,C,2)
    depths_p: np.ndarray        # (N,) depth of each point in the query camera
    unit3d: np.ndarray          # (N,3) frozen N(0,1) draws for 3D noise
    unit2d_p: np.ndarray        # (N,2)
    unit2d_rig: np.ndarray      # (N,C,2)
    sigma3d_pct: float = 0.0
    sigma2d_px: float = 0.0
    noisy_points: Optional[np.ndarray] = None
    noisy_pixels_p: Optional[np.ndarray] = None
    noisy_pixels_rig: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.noisy_points is None:
            self.noisy_points = self.points
            self.noisy_pixels_p = self.pixels_p
            self.noisy_pixels_rig = self.pixels_rig

    @property
    def num_points(self):
        return self.points.shape[0]

    def corr_2d3d(self, i, noisy=True):
        px = self.noisy_pixels_p if noisy else self.pixels_p
        X = self.noisy_points if noisy else self.points
        return Corr2D3D(p=[px[i, 0], px[i, 1], 1.0], X=X[i])

    def corr_2d2d(self, i, cam, noisy=True):
        px = self.noisy_pixels_p if noisy else self.pixels_p
        gx = self.noisy_pixels_rig if noisy else self.pixels_rig
        c = self.rig[cam]
        g = np.array([gx[i, cam, 0], gx[i, cam, 1], 1.0])
        q = c.rotation @ np.array([g[0] / c.focal, g[1] / c.focal, 1.0])
        return Corr2D2D(p=[px[i, 0], px[i, 1], 1.0], q=q,
                        tg=c.translation, cam_index=cam)

    def pool(self, noisy=True):
        """All correspondences: every point as 2D-3D plus every (point, rig
        camera) pair as 2D-2D."""
        n, c = self.pixels_rig.shape[:2]
        twod = [self.corr_2d2d(i, j, noisy) for i in range(n) for j in range(c)]
        threed = [self.corr_2d3d(i, noisy) for i in range(n)]
        return HybridCorrespondences(twod=twod, threed=threed)


def _look_at(center, rng):
    """World-to-camera rotation for a camera at ``center`` looking at the
    origin, with randomized roll."""
    z = -np.asarray(center, dtype=float)
    z = z / np.linalg.norm(z)
    while True:
        up = rng.normal(size=3)
        up /= np.linalg.norm(up)
        if abs(up @ z) < 0.99:
            break
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.vstack([x, y, z])


def _sample_center(cfg, rng):
    d = rng.uniform(*cfg.distance_range)
    v = rng.normal(size=3)
    return d * v / np.linalg.norm(v)


def _project(R_wc, center, f, pts):
    """Project rig-frame points into a look-at camera; returns (pixels, depths)."""
    local = (pts - center) @ R_wc.T
    z = local[:, 2]
    px = f * local[:, :2] / z[:, None]
    return px, z


def generate_scene(config: SceneConfig, index: int) -> SceneInstance:
    """Build scene ``index`` deterministically from (config.seed, index).

    Points are resampled until all of them project inside every camera's
    image with positive depth; scenes where that fails 1000 times in a row
    raise RuntimeError.
    """
    rng = np.random.default_rng([config.seed, index])
    half = config.cube_side / 2.0
    bound = config.image_size / 2.0

    cams = []
    for _ in range(config.num_rig_cams):
        c = _sample_center(config, rng)
        R_wc = _look_at(c, rng)
        f = rng.uniform(*config.focal_range)
        # stored as local-to-rig: rotation maps camera axes into the rig frame
        cams.append(PinholeCamera(rotation=R_wc.T, translation=c, focal=f))
    rig = GeneralizedCamera(cameras=tuple(cams))

    # query camera: base look-at pose, then motion-specific displacement
    base_center = _sample_center(config, rng)
    R_q = _look_at(base_center, rng)
    f_q = rng.uniform(*config.focal_range)
    if config.motion == "random":
        q_center = base_center
    else:
        dist = np.linalg.norm(base_center)
        step = rng.uniform(*config.displacement_range) * dist
        if config.motion == "forward":
            axis = R_q[2]                      # optical axis in world coords
            q_center = base_center + rng.choice([-1.0, 1.0]) * step * axis
        else:
            theta = rng.uniform(0.0, 2.0 * math.pi)
            lateral = math.cos(theta) * R_q[0] + math.sin(theta) * R_q[1]
            q_center = base_center + step * lateral

    n = config.num_points
    pts = np.empty((0, 3))
    for _ in range(1000):
        cand = rng.uniform(-half, half, size=(4 * n, 3))
        ok = np.ones(len(cand), dtype=bool)
        px_q, z_q = _project(R_q, q_center, f_q, cand)
        ok &= (z_q > 0) & (np.abs(px_q) <= bound).all(axis=1)
        for cam in cams:
            px, z = _project(cam.rotation.T, cam.translation, cam.focal, cand)
            ok &= (z > 0) & (np.abs(px) <= bound).all(axis=1)
        pts = np.vstack([pts, cand[ok]])
        if len(pts) >= n:
            pts = pts[:n]
            break
    else:
        raise RuntimeError(f"scene {index}: point resampling failed 1000 times")

    pixels_p, depths_p = _project(R_q, q_center, f_q, pts)
    pixels_rig = np.empty((n, len(cams), 2))
    for j, cam in enumerate(cams):
        pixels_rig[:, j], _ = _project(cam.rotation.T, cam.translation,
                                       cam.focal, pts)

    gt = PoseWithFocal(R=R_q, t=-R_q @ q_center, f=f_q)
    return SceneInstance(
        index=index, rig=rig, ground_truth=gt,
        points=pts, pixels_p=pixels_p, pixels_rig=pixels_rig,
        depths_p=depths_p,
        unit3d=rng.normal(size=(n, 3)),
        unit2d_p=rng.normal(size=(n, 2)),
        unit2d_rig=rng.normal(size=(n, len(cams), 2)),
    )


def add_noise(scene: SceneInstance, sigma3d_pct: float,
              sigma2d_px: float) -> SceneInstance:
    """Return a copy of the scene with scaled noise applied.

    3D noise is isotropic Gaussian per point with sigma equal to
    ``sigma3d_pct`` percent of the point's depth in the query camera; 2D
    noise is Gaussian in pixel units on every image observation.  The unit
    draws are frozen in the scene, so the same scene at two sigma levels
    differs only by the scale factors.
    """
    sig3 = (sigma3d_pct / 100.0) * scene.depths_p
    noisy_points = scene.points + sig3[:, None] * scene.unit3d
    noisy_pixels_p = scene.pixels_p + sigma2d_px * scene.unit2d_p
    noisy_pixels_rig = scene.pixels_rig + sigma2d_px * scene.unit2d_rig
    out = replace(scene)
    out.sigma3d_pct = sigma3d_pct
    out.sigma2d_px = sigma2d_px
    out.noisy_points = noisy_points
    out.noisy_pixels_p = noisy_pixels_p
    out.noisy_pixels_rig = noisy_pixels_rig
    return out


# ---------------------------------------------------------------------------
# Minimal-sample drawing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleSpec:
    """Shape of a minimal sample: ``cam_groups[g]`` 2D-2D correspondences
    drawn through a common rig camera for each group g (distinct cameras
    across groups), plus ``n`` 2D-3D correspondences.  All points distinct."""
    cam_groups: tuple
    n: int

    @property
    def m(self):
        return sum(self.cam_groups)


def draw_minimal_sample(scene: SceneInstance, spec: SampleSpec, rng,
                        noisy=True) -> HybridCorrespondences:
    num_needed = spec.m + spec.n
    idx = rng.choice(scene.num_points, size=num_needed, replace=False)
    cams = rng.choice(len(scene.rig), size=len(spec.cam_groups), replace=False)
    twod = []
    pos = 0
    for g, count in enumerate(spec.cam_groups):
        for _ in range(count):
            twod.append(scene.corr_2d2d(idx[pos], int(cams[g]), noisy))
            pos += 1
    threed = [scene.corr_2d3d(idx[pos + j], noisy) for j in range(spec.n)]
    return HybridCorrespondences(twod=twod, threed=threed)


def make_ransac_problem(scene: SceneInstance, num_corrs: int,
                        outlier_frac: float, rng, noisy=True):
    """Draw a contaminated correspondence set for robust estimation tests.

    Half the correspondences are 2D-2D (rig camera chosen at random per
    entry), half 2D-3D.  Outliers replace the query pixel with a uniform
    draw over the image.  Returns (HybridCorrespondences, inlier_mask) with
    the mask aligned to the [twod, threed] concatenation.
    """
    n2 = num_corrs // 2
    n3 = num_corrs - n2
    if n3 > scene.num_points:
        raise ValueError("scene has too few points for the requested set")
    bound = 500.0
    pts3 = rng.choice(scene.num_points, size=n3, replace=False)
    twod, threed, labels2, labels3 = [], [], [], []
    for _ in range(n2):
        i = int(rng.integers(scene.num_points))
        cam = int(rng.integers(len(scene.rig)))
        c = scene.corr_2d2d(i, cam, noisy)
        if rng.uniform() < outlier_frac:
            p = rng.uniform(-bound, bound, size=2)
            c = Corr2D2D(p=[p[0], p[1], 1.0], q=c.q, tg=c.tg, cam_index=cam)
            labels2.append(False)
        else:
            labels2.append(True)
        twod.append(c)
    for i in pts3:
        c = scene.corr_2d3d(int(i), noisy)
        if rng.uniform() < outlier_frac:
            p = rng.uniform(-bound, bound, size=2)
            c = Corr2D3D(p=[p[0], p[1], 1.0], X=c.X)
            labels3.append(False)
        else:
            labels3.append(True)
        threed.append(c)
    corrs = HybridCorrespondences(twod=twod, threed=threed)
    return corrs, np.array(labels2 + labels3, dtype=bool)


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    solver: str
    motion: str
    sigma3d_pct: float
    sigma2d_px: float
    metric: str
    q25: float
    median: float
    q75: float
    fail_rate: float
    n: int


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def write_csv(self, path_or_file):
        close = False
        if isinstance(path_or_file, (str, bytes)):
            fh = open(path_or_file, "w", newline="")
            close = True
        else:
            fh = path_or_file
        try:
            w = csv.writer(fh)
            w.writerow(["solver", "motion", "sigma3d_pct", "sigma2d_px",
                        "metric", "q25", "median", "q75", "fail_rate", "n"])
            for r in self.rows:
                w.writerow([r.solver, r.motion,
                            format(r.sigma3d_pct, ".17g"),
                            format(r.sigma2d_px, ".17g"),
                            r.metric,
                            format(r.q25, ".17g"),
                            format(r.median, ".17g"),
                            format(r.q75, ".17g"),
                            format(r.fail_rate, ".17g"),
                            r.n])
        finally:
            if close:
                fh.close()

    def to_csv_text(self):
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    def lookup(self, solver, motion, sigma3d_pct, metric):
        for r in self.rows:
            if (r.solver == solver and r.motion == motion
                    and r.metric == metric
                    and abs(r.sigma3d_pct - sigma3d_pct) < 1e-12):
                return r
        raise KeyError((solver, motion, sigma3d_pct, metric))


def _best_against_truth(solutions, gt):
    """Oracle candidate selection: smallest rotation error vs. ground truth."""
    best = None
    best_err = None
    for s in solutions:
        e = rotation_error_deg(s.R, gt.R)
        if best is None or e < best_err:
            best, best_err = s, e
    return best


def _scene_records(args):
    """Errors for one scene across all sigma levels and solvers.

    Runs in worker processes; must stay picklable and import-light.
    """
    config, index, solver_names, sigma_levels = args
    from .solvers import get_solver

    scene = generate_scene(config, index)
    out = []
    for si, name in enumerate(solver_names):
        entry = get_solver(name)
        srng = np.random.default_rng([config.seed, index, 1000 + si])
        sample_idx_state = srng.bit_generator.state
        for sigma in sigma_levels:
            noisy = add_noise(scene, sigma, config.noise_2d_px)
            # identical sample across sigma levels: restore the rng state
            srng.bit_generator.state = sample_idx_state
            sample = draw_minimal_sample(noisy, entry.sample_spec, srng)
            try:
                sols = entry.solve(sample)
            except Exception:
                sols = []
            best = _best_against_truth(sols, scene.ground_truth)
            if best is None:
                out.append((index, name, sigma, None))
            else:
                gt = scene.ground_truth
                out.append((index, name, sigma, (
                    rotation_error_deg(best.R, gt.R),
                    translation_error(best.t, gt.t),
                    focal_rel_error(best.f, gt.f),
                )))
    return out


def run_benchmark(config: SceneConfig, solver_names,
                  sigma_levels=DEFAULT_SIGMA_LEVELS,
                  motions=MOTIONS, jobs=1) -> BenchReport:
    """Minimal-solver noise sweep with oracle candidate selection.

    For each motion model and scene, every solver gets one minimal sample;
    the sample and its noise directions are shared across sigma levels so
    the error curves are directly comparable.  Scene failures (no solution)
    count toward fail_rate and are excluded from the quantiles.
    """
    report = BenchReport()
    for motion in motions:
        cfg = replace(config, motion=motion)
        tasks = [(cfg, i, tuple(solver_names), tuple(sigma_levels))
                 for i in range(cfg.num_scenes)]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                chunks = list(ex.map(_scene_records, tasks,
                                     chunksize=max(1, len(tasks) // (4 * jobs))))
        else:
            chunks = [_scene_records(t) for t in tasks]
        records = [r for chunk in chunks for r in chunk]
        records.sort(key=lambda r: (r[1], r[2], r[0]))

        for name in solver_names:
            for sigma in sigma_levels:
                errs = [r[3] for r in records if r[1] == name and r[2] == sigma]
                n = len(errs)
                good = np.array([e for e in errs if e is not None])
                fail_rate = 1.0 - len(good) / n if n else 0.0
                for k, metric in enumerate(("rotation_deg", "translation",
                                            "focal_rel")):
                    if len(good):
                        q25, med, q75 = np.quantile(good[:, k],
                                                    [0.25, 0.5, 0.75])
                    else:
                        q25 = med = q75 = float("nan")
                    report.rows.append(BenchRow(
                        solver=name, motion=motion, sigma3d_pct=float(sigma),
                        sigma2d_px=float(config.noise_2d_px), metric=metric,
                        q25=float(q25), median=float(med), q75=float(q75),
                        fail_rate=float(fail_rate), n=n))
    return report
