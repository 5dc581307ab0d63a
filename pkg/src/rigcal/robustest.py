"""Robust two-view and absolute-pose estimation.

Fundamental matrices come from a locally-optimized RANSAC around the
normalized eight-point solver with Sampson-distance scoring; absolute pose
from a P3P minimal solver inside RANSAC followed by robust pose-only
refinement; multi-view triangulation from pair-hypothesis RANSAC. All
estimators are deterministic under a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import ba
from .geometry import (
    OK,
    CameraModel,
    DegenerateGeometry,
    ViewPose,
    enforce_rank2,
    project_points,
    sampson_distance,
    symmetric_epipolar_distance,
    triangulate_dlt,
    unproject,
)


class EstimationError(RuntimeError):
    pass


class DegenerateEstimate(EstimationError):
    """Too few inliers or a degenerate sample configuration."""


class InsufficientInliers(EstimationError):
    pass


class TriangulationFailed(EstimationError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 10000
    confidence: float = 0.9999
    threshold: float = 2.0   # pixels
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must be in (0, 1)")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")

    @staticmethod
    def for_fundamental(seed: int = 0) -> "RansacConfig":
        return RansacConfig(threshold=2.0, seed=seed)

    @staticmethod
    def for_absolute_pose(seed: int = 0) -> "RansacConfig":
        return RansacConfig(threshold=12.0, seed=seed)


@dataclass(frozen=True)
class Thresholds:
    """Outlier gates used by the pipelines; inf disables a gate."""

    f_err: float = 10.0   # symmetric epipolar distance cutoff, pixels
    b_err: float = 20.0   # reprojection cutoff after BA, pixels
    r_max: float = math.inf  # reprojection gate for ingested external tracks

    def __post_init__(self):
        for v in (self.f_err, self.b_err, self.r_max):
            if not v > 0:
                raise ValueError("thresholds must be positive (inf allowed)")


def _adaptive_iterations(inlier_ratio: float, sample_size: int, confidence: float) -> int:
    if inlier_ratio <= 0:
        return 1 << 30
    good = inlier_ratio ** sample_size
    if good >= 1.0:
        return 1
    denom = math.log1p(-good)
    if denom >= 0:
        return 1 << 30
    return int(math.ceil(math.log1p(-confidence) / denom))


# ---------------------------------------------------------------------------
# fundamental matrix
# ---------------------------------------------------------------------------


@dataclass
class FundamentalResult:
    F: np.ndarray
    inliers: np.ndarray       # bool mask over the input correspondences
    match_count: int          # inliers used for the final fit
    homography_degenerate: bool = False


def _normalize_points(pts: np.ndarray):
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    s = math.sqrt(2.0) / max(d, 1e-12)
    T = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    return (pts - centroid) * s, T


def _eight_point(x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """Normalized eight-point fit of F with rank-2 enforcement."""
    ni, Ti = _normalize_points(x_i)
    nj, Tj = _normalize_points(x_j)
    u, v = ni[:, 0], ni[:, 1]
    up, vp = nj[:, 0], nj[:, 1]
    ones = np.ones(len(u))
    A = np.stack([up * u, up * v, up, vp * u, vp * v, vp, u, v, ones], axis=1)
    _, _, vt = np.linalg.svd(A)
    F = vt[-1].reshape(3, 3)
    F = enforce_rank2(F)
    F = Tj.T @ F @ Ti
    n = np.linalg.norm(F)
    return F / n if n > 0 else F


def _sampson_jacobian(F: np.ndarray, x_i: np.ndarray, x_j: np.ndarray):
    """Signed first-order epipolar residual and its Jacobian in the 9 F entries."""
    n = len(x_i)
    xi = np.concatenate([x_i, np.ones((n, 1))], axis=1)
    xj = np.concatenate([x_j, np.ones((n, 1))], axis=1)
    Fxi = xi @ F.T
    Ftxj = xj @ F
    num = np.sum(xj * Fxi, axis=1)
    den = Fxi[:, 0] ** 2 + Fxi[:, 1] ** 2 + Ftxj[:, 0] ** 2 + Ftxj[:, 1] ** 2
    den = np.maximum(den, 1e-300)
    sq = np.sqrt(den)
    r = num / sq
    # d num / dF_ab = xj_a * xi_b
    dnum = xj[:, :, None] * xi[:, None, :]
    dden = np.zeros((n, 3, 3))
    for a in range(2):
        dden[:, a, :] += 2.0 * Fxi[:, a, None] * xi
    for b in range(2):
        dden[:, :, b] += 2.0 * Ftxj[:, b, None] * xj
    J = dnum / sq[:, None, None] - (num / (2.0 * den * sq))[:, None, None] * dden
    return r, J.reshape(n, 9)


def _refine_fundamental(F: np.ndarray, x_i: np.ndarray, x_j: np.ndarray,
                        max_iterations: int = 30) -> np.ndarray:
    def fun(params):
        Fc = params.reshape(3, 3)
        return _sampson_jacobian(Fc, x_i, x_j)

    res = ba.lm_least_squares(fun, F.reshape(9),
                              ba.LmOptions(max_iterations=max_iterations))
    F2 = res.x.reshape(3, 3)
    F2 = enforce_rank2(F2)
    n = np.linalg.norm(F2)
    return F2 / n if n > 0 else F2


def _homography_consistency(x_i: np.ndarray, x_j: np.ndarray, threshold: float,
                            rng: np.random.Generator) -> float:
    """Highest fraction of points consistent with a single homography."""
    n = len(x_i)
    if n < 4:
        return 0.0
    xi = np.concatenate([x_i, np.ones((n, 1))], axis=1)
    best = 0
    for _ in range(24):
        idx = rng.choice(n, size=4, replace=False)
        A = []
        for k in idx:
            u, v = x_i[k]
            up, vp = x_j[k]
            A.append([-u, -v, -1, 0, 0, 0, u * up, v * up, up])
            A.append([0, 0, 0, -u, -v, -1, u * vp, v * vp, vp])
        _, s, vt = np.linalg.svd(np.asarray(A))
        if s[-2] < 1e-10 * s[0]:
            continue
        H = vt[-1].reshape(3, 3)
        proj = xi @ H.T
        with np.errstate(divide="ignore", invalid="ignore"):
            pred = proj[:, :2] / proj[:, 2:3]
        err = np.linalg.norm(pred - x_j, axis=1)
        err = np.where(np.isfinite(err), err, np.inf)
        best = max(best, int(np.sum(err <= threshold)))
    return best / n


def estimate_fundamental(x_i: np.ndarray, x_j: np.ndarray,
                         config: RansacConfig | None = None) -> FundamentalResult:
    """Locally-optimized RANSAC around the normalized eight-point solver.

    Hypotheses are scored by Sampson distance; every new best model is
    refined on its inliers (iterated refit plus a Levenberg-Marquardt polish
    of the Sampson residuals) before the final all-inlier refit. Raises
    DegenerateEstimate when fewer than 15 inliers survive; a pair whose
    inliers are >= 99% homography-consistent is only flagged.
    """
    cfg = config or RansacConfig.for_fundamental()
    x_i = np.asarray(x_i, dtype=float)
    x_j = np.asarray(x_j, dtype=float)
    n = len(x_i)
    if n < 8 or len(x_j) != n:
        raise ValueError(f"need >= 8 correspondences, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xF)))

    best_mask = None
    best_count = 0
    best_F = None
    max_iter = cfg.max_iterations
    it = 0
    while it < max_iter:
        it += 1
        idx = rng.choice(n, size=8, replace=False)
        try:
            F = _eight_point(x_i[idx], x_j[idx])
        except np.linalg.LinAlgError:
            continue
        d = sampson_distance(F, x_i, x_j)
        mask = d <= cfg.threshold
        count = int(mask.sum())
        if count > best_count:
            # local optimization: refit on inliers, then nonlinear polish
            mask_lo, F_lo = mask, F
            for _ in range(3):
                if mask_lo.sum() < 8:
                    break
                F_try = _eight_point(x_i[mask_lo], x_j[mask_lo])
                d_try = sampson_distance(F_try, x_i, x_j)
                m_try = d_try <= cfg.threshold
                if m_try.sum() >= mask_lo.sum():
                    mask_lo, F_lo = m_try, F_try
                else:
                    break
            if mask_lo.sum() >= 8:
                F_nl = _refine_fundamental(F_lo, x_i[mask_lo], x_j[mask_lo])
                d_nl = sampson_distance(F_nl, x_i, x_j)
                m_nl = d_nl <= cfg.threshold
                if m_nl.sum() >= mask_lo.sum():
                    mask_lo, F_lo = m_nl, F_nl
            if mask_lo.sum() > best_count:
                best_count = int(mask_lo.sum())
                best_mask = mask_lo
                best_F = F_lo
            max_iter = min(cfg.max_iterations,
                           _adaptive_iterations(best_count / n, 8, cfg.confidence))
    if best_F is None or best_count < 15:
        raise DegenerateEstimate(f"only {best_count} inliers after RANSAC")

    F = _eight_point(x_i[best_mask], x_j[best_mask])
    d = sampson_distance(F, x_i, x_j)
    mask = d <= cfg.threshold
    if mask.sum() < best_count:
        F, mask = best_F, best_mask
    h_frac = _homography_consistency(x_i[mask], x_j[mask], cfg.threshold, rng)
    return FundamentalResult(F=F, inliers=mask, match_count=int(mask.sum()),
                             homography_degenerate=h_frac >= 0.99)


def epipolar_filter(x_i: np.ndarray, x_j: np.ndarray, F: np.ndarray, f_err: float) -> np.ndarray:
    """Mask of pairs within the symmetric epipolar distance gate.

    ``f_err = inf`` keeps everything.
    """
    x_i = np.atleast_2d(np.asarray(x_i, dtype=float))
    if not math.isfinite(f_err):
        return np.ones(len(x_i), dtype=bool)
    d = symmetric_epipolar_distance(F, x_i, x_j)
    return d <= f_err


# ---------------------------------------------------------------------------
# absolute pose (P3P + robust refinement)
# ---------------------------------------------------------------------------


def p3p_solve(points: np.ndarray, bearings: np.ndarray) -> list:
    """Grunert's P3P: all poses fitting 3 world points and unit bearings.

    Returns a list of ViewPose candidates (x_cam = R x_world + t).
    """
    P = np.asarray(points, dtype=float)
    f = np.asarray(bearings, dtype=float)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    a = np.linalg.norm(P[1] - P[2])
    b = np.linalg.norm(P[0] - P[2])
    c = np.linalg.norm(P[0] - P[1])
    if min(a, b, c) < 1e-12:
        return []
    cos_a = float(f[1] @ f[2])
    cos_b = float(f[0] @ f[2])
    cos_g = float(f[0] @ f[1])
    A = (a * a) / (b * b)
    B = (c * c) / (b * b)

    Poly = np.polynomial.Polynomial
    v = Poly([0.0, 1.0])
    q_b = Poly([1.0, -2.0 * cos_b, 1.0])            # 1 - 2 cos_b v + v^2
    N = Poly([1.0]) - v * v + (A - B) * q_b         # numerator of u(v)
    D = Poly([2.0 * cos_g, -2.0 * cos_a])           # denominator of u(v)
    quartic = N * N + D * D - 2.0 * cos_g * N * D - B * q_b * D * D
    coefs = quartic.coef
    if np.allclose(coefs, 0.0):
        return []
    roots = Poly(coefs).roots()

    poses = []
    for r in roots:
        if abs(r.imag) > 1e-8 * (1.0 + abs(r.real)):
            continue
        vv = float(r.real)
        if vv <= 0:
            continue
        dd = D(vv)
        if abs(dd) < 1e-12:
            continue
        uu = N(vv) / dd
        if uu <= 0:
            continue
        s1sq = (b * b) / (1.0 + vv * vv - 2.0 * vv * cos_b)
        if s1sq <= 0:
            continue
        s1 = math.sqrt(s1sq)
        s2, s3 = uu * s1, vv * s1
        # validate against all three original constraints
        e1 = s2 * s2 + s3 * s3 - 2 * s2 * s3 * cos_a - a * a
        e2 = s1 * s1 + s3 * s3 - 2 * s1 * s3 * cos_b - b * b
        e3 = s1 * s1 + s2 * s2 - 2 * s1 * s2 * cos_g - c * c
        scale = a * a + b * b + c * c
        if max(abs(e1), abs(e2), abs(e3)) > 1e-6 * scale:
            continue
        Y = f * np.array([s1, s2, s3])[:, None]
        pose = _kabsch(P, Y)
        if pose is not None:
            poses.append(pose)
    return poses


def _kabsch(X: np.ndarray, Y: np.ndarray) -> ViewPose | None:
    """Rigid transform with Y = R X + t (least squares, det(R) = +1)."""
    xm = X.mean(axis=0)
    ym = Y.mean(axis=0)
    H = (X - xm).T @ (Y - ym)
    u, _, vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        return None
    R = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = ym - R @ xm
    return ViewPose.from_matrix(R, t)


def _collinear(pts: np.ndarray) -> bool:
    v1 = pts[1] - pts[0]
    v2 = pts[2] - pts[0]
    area = np.linalg.norm(np.cross(v1, v2))
    scale = max(np.linalg.norm(v1) * np.linalg.norm(v2), 1e-300)
    return area < 1e-6 * scale


def absolute_pose(points3d: np.ndarray, pixels: np.ndarray, camera: CameraModel,
                  config: RansacConfig | None = None) -> tuple:
    """Robust camera pose from 2D-3D correspondences.

    P3P on unprojected bearings inside RANSAC, scored by pixel reprojection
    error, then Cauchy-robust pose-only refinement on the inliers. Returns
    (ViewPose, inlier mask). Raises InsufficientInliers below 6 final
    inliers and DegenerateEstimate when samples stay collinear.
    """
    cfg = config or RansacConfig.for_absolute_pose()
    pts = np.asarray(points3d, dtype=float)
    pix = np.asarray(pixels, dtype=float)
    n = len(pts)
    if n < 4 or len(pix) != n:
        raise ValueError(f"need >= 4 correspondences, got {n}")
    bearings = np.stack([unproject(camera, p) for p in pix])
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xA)))

    best_pose = None
    best_count = 0
    best_mask = None
    max_iter = cfg.max_iterations
    collinear_streak = 0
    it = 0
    while it < max_iter:
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        if _collinear(pts[idx]):
            collinear_streak += 1
            if collinear_streak > 200:
                raise DegenerateEstimate("minimal samples persistently collinear")
            continue
        collinear_streak = 0
        for pose in p3p_solve(pts[idx], bearings[idx]):
            proj, status = project_points(camera, pose, pts)
            err = np.linalg.norm(proj - pix, axis=1)
            mask = (status == OK) & np.where(np.isfinite(err), err <= cfg.threshold, False)
            count = int(mask.sum())
            if count > best_count:
                best_count = count
                best_pose = pose
                best_mask = mask
                max_iter = min(cfg.max_iterations,
                               _adaptive_iterations(count / n, 3, cfg.confidence))
    if best_pose is None:
        raise InsufficientInliers("no pose hypothesis gathered any inliers")

    pose = _refine_pose(best_pose, camera, pts[best_mask], pix[best_mask])
    proj, status = project_points(camera, pose, pts)
    err = np.linalg.norm(proj - pix, axis=1)
    mask = (status == OK) & np.where(np.isfinite(err), err <= cfg.threshold, False)
    if int(mask.sum()) < int(best_mask.sum()):
        pose, mask = best_pose, best_mask
    if int(mask.sum()) < 6:
        raise InsufficientInliers(f"{int(mask.sum())} inliers below the minimum of 6")
    return pose, mask


def _refine_pose(pose: ViewPose, camera: CameraModel, pts: np.ndarray, pix: np.ndarray,
                 iterations: int = 50) -> ViewPose:
    """Cauchy-robust pose-only refinement; never worse than the input."""
    problem = ba.BaProblem(
        cameras=[camera], poses=[pose], points=pts,
        obs_view=np.zeros(len(pts), dtype=int), obs_point=np.arange(len(pts)),
        obs_pixel=pix,
    )
    stage = ba.BaStage("pose_refine", iterations, extrinsics=True, points=False)
    try:
        solved, _ = ba.solve(problem, stage, cauchy_scale=1.0)
    except ba.NumericalFailure:
        return pose
    return solved.poses[0]


# ---------------------------------------------------------------------------
# robust multi-view triangulation
# ---------------------------------------------------------------------------


def triangulate_robust(observations: Sequence, config: RansacConfig | None = None) -> tuple:
    """RANSAC triangulation over (camera, pose, pixel) observations.

    Every observation pair is a hypothesis (triangulated by DLT); support is
    the set of observations reprojecting within the threshold with the point
    on the visible side of the camera. The best support set is re-triangulated
    for the final point. No minimum triangulation angle is imposed.

    Returns (point, inlier mask). Raises TriangulationFailed when no pair
    yields a hypothesis with >= 2 supporting observations.
    """
    cfg = config or RansacConfig.for_absolute_pose()
    obs = list(observations)
    n = len(obs)
    if n < 2:
        raise ValueError("need >= 2 observations")
    pix = np.stack([np.asarray(o[2], dtype=float) for o in obs])

    best_mask = None
    best_count = 0
    best_err = math.inf
    for i in range(n):
        for j in range(i + 1, n):
            try:
                point = triangulate_dlt([obs[i], obs[j]])
            except DegenerateGeometry:
                continue
            errs = _reprojection_all(obs, point)
            mask = errs <= cfg.threshold
            count = int(mask.sum())
            total = float(np.sum(np.minimum(errs, cfg.threshold)))
            if count > best_count or (count == best_count and total < best_err):
                best_count = count
                best_mask = mask
                best_err = total
    if best_mask is None or best_count < 2:
        raise TriangulationFailed("no observation pair yields a supported point")

    try:
        point = triangulate_dlt([obs[k] for k in np.flatnonzero(best_mask)])
    except DegenerateGeometry:
        point = triangulate_dlt([obs[k] for k in np.flatnonzero(best_mask)[:2]])
    errs = _reprojection_all(obs, point)
    mask = errs <= cfg.threshold
    if int(mask.sum()) < 2:
        mask = best_mask
    return point, mask


def _reprojection_all(obs: Sequence, point: np.ndarray) -> np.ndarray:
    errs = np.full(len(obs), math.inf)
    for k, (camera, pose, pixel) in enumerate(obs):
        proj, status = project_points(camera, pose, point[None, :])
        if status[0] == OK:
            errs[k] = float(np.linalg.norm(proj[0] - np.asarray(pixel, dtype=float)))
    return errs
