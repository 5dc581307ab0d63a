"""Levenberg-Marquardt least-squares engine and bundle adjustment.

Two layers live here:

* ``lm_least_squares`` — a dense LM loop over a plain parameter vector,
  shared by focal self-calibration and the robust-estimation refinements.
* ``BaProblem``/``solve`` — reprojection bundle adjustment over camera,
  pose and point blocks with a Schur complement on the points, Cauchy
  robustification, stage-wise parameter activation and outlier removal.

Both use the same damping schedule: lambda starts at 1e-4, multiplies by 10
on a rejected step and divides by 3 on an accepted one. Accepted steps never
increase the robustified cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .geometry import (
    OK,
    CameraModel,
    ViewPose,
    project_points,
    project_with_jacobians,
    quat_exp,
    quat_multiply,
    skew,
)


class BaError(RuntimeError):
    pass


class NumericalFailure(BaError):
    """Cost became non-finite."""


# ---------------------------------------------------------------------------
# generic dense Levenberg-Marquardt
# ---------------------------------------------------------------------------


@dataclass
class LmOptions:
    max_iterations: int = 100
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 3.0
    ftol: float = 1e-8          # relative cost decrease on an accepted step
    gtol: float = 1e-10         # gradient infinity norm
    max_lambda: float = 1e32
    cauchy_scale: float | None = None  # None = plain least squares
    block_size: int = 1         # residuals per robust-loss block


@dataclass
class LmResult:
    x: np.ndarray
    cost: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)  # (iter, cost, accepted, lambda)


def cauchy_cost(sq_norms: np.ndarray, scale: float) -> np.ndarray:
    s2 = scale * scale
    return s2 * np.log1p(sq_norms / s2)


def cauchy_weight(sq_norms: np.ndarray, scale: float) -> np.ndarray:
    """d rho / d z for rho(z) = s^2 log(1 + z / s^2)."""
    s2 = scale * scale
    return 1.0 / (1.0 + sq_norms / s2)


def _block_sq_norms(r: np.ndarray, block: int) -> np.ndarray:
    if block == 1:
        return r * r
    return np.sum(r.reshape(-1, block) ** 2, axis=1)


def _robustify(r: np.ndarray, J: np.ndarray | None, scale: float | None, block: int):
    """Return (cost, weighted residuals, weighted Jacobian)."""
    z = _block_sq_norms(r, block)
    if scale is None:
        cost = float(np.sum(z))
        return cost, r, J
    cost = float(np.sum(cauchy_cost(z, scale)))
    w = np.sqrt(cauchy_weight(z, scale))
    w_full = np.repeat(w, block) if block > 1 else w
    rw = r * w_full
    Jw = J * w_full[:, None] if J is not None else None
    return cost, rw, Jw


def lm_least_squares(fun: Callable, x0: np.ndarray, options: LmOptions | None = None) -> LmResult:
    """Minimize sum of (possibly robustified) squared residuals.

    ``fun(x)`` must return ``(residuals, jacobian)`` with the jacobian of the
    raw residuals. A zero-gradient start returns immediately with zero
    iterations.
    """
    opt = options or LmOptions()
    x = np.asarray(x0, dtype=float).copy()
    r, J = fun(x)
    cost, rw, Jw = _robustify(r, J, opt.cauchy_scale, opt.block_size)
    if not math.isfinite(cost):
        raise NumericalFailure(f"initial cost {cost}")
    trace = []
    lam = opt.initial_lambda
    it = 0
    converged = False
    while it < opt.max_iterations:
        g = Jw.T @ rw
        if float(np.max(np.abs(g), initial=0.0)) < opt.gtol:
            converged = True
            break
        H = Jw.T @ Jw
        d = np.diag(H).copy()
        damped = H + lam * (np.diag(d) + 1e-8 * np.eye(len(x)))
        try:
            step = np.linalg.solve(damped, -g)
        except np.linalg.LinAlgError:
            step = np.full_like(x, np.nan)
        it += 1
        ok_step = np.all(np.isfinite(step))
        if ok_step:
            x_new = x + step
            r_new, J_new = fun(x_new)
            new_cost, rw_new, Jw_new = _robustify(r_new, J_new, opt.cauchy_scale, opt.block_size)
        else:
            new_cost = math.inf
        if math.isfinite(new_cost) and new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            x, cost, rw, Jw = x_new, new_cost, rw_new, Jw_new
            trace.append((it, cost, True, lam))
            lam /= opt.lambda_down
            if rel < opt.ftol:
                converged = True
                break
        else:
            trace.append((it, cost, False, lam))
            lam *= opt.lambda_up
            if lam > opt.max_lambda:
                converged = True
                break
    else:
        # loop exhausted max_iterations
        pass
    return LmResult(x=x, cost=cost, iterations=it, converged=converged, trace=trace)


# ---------------------------------------------------------------------------
# bundle adjustment problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaStage:
    """Which parameter groups a solve refines, and for how many iterations."""

    name: str
    max_iterations: int
    extrinsics: bool = False
    focal: bool = False
    distortion: bool = False
    principal_point: bool = False
    points: bool = True

    def __post_init__(self):
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")


@dataclass
class BaProblem:
    """Reprojection problem over per-view camera/pose blocks and 3D points.

    Observations reference view and point indices; ``point_ids`` optionally
    carries stable external identifiers across outlier removal.
    """

    cameras: list
    poses: list
    points: np.ndarray           # (P, 3)
    obs_view: np.ndarray         # (N,)
    obs_point: np.ndarray        # (N,)
    obs_pixel: np.ndarray        # (N, 2)
    fixed_poses: frozenset = frozenset()
    fixed_cameras: frozenset = frozenset()
    gauge_translation: tuple | None = None  # (view, coordinate) frozen during the solve
    point_ids: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.obs_view = np.asarray(self.obs_view, dtype=int)
        self.obs_point = np.asarray(self.obs_point, dtype=int)
        self.obs_pixel = np.atleast_2d(np.asarray(self.obs_pixel, dtype=float))
        n_views = len(self.cameras)
        if len(self.poses) != n_views:
            raise ValueError("cameras and poses must align")
        if self.obs_view.size and (self.obs_view.min() < 0 or self.obs_view.max() >= n_views):
            raise ValueError("observation references unknown view")
        if self.obs_point.size and (self.obs_point.min() < 0 or self.obs_point.max() >= len(self.points)):
            raise ValueError("observation references unknown point")

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def n_obs(self) -> int:
        return len(self.obs_view)


def reprojection_errors(problem: BaProblem) -> np.ndarray:
    """Per-observation pixel error; inf where projection is invalid."""
    errs = np.full(problem.n_obs, np.inf)
    for v in range(problem.n_views):
        sel = problem.obs_view == v
        if not np.any(sel):
            continue
        pix, status = project_points(problem.cameras[v], problem.poses[v],
                                     problem.points[problem.obs_point[sel]])
        e = np.linalg.norm(pix - problem.obs_pixel[sel], axis=1)
        e = np.where(status == OK, e, np.inf)
        errs[sel] = e
    return errs


def _intrinsic_vector(cam: CameraModel) -> np.ndarray:
    return np.array([cam.f, *cam.k, cam.cx, cam.cy])


def _camera_from_vector(cam: CameraModel, vec: np.ndarray) -> CameraModel:
    nd = cam.kind.n_dist
    return cam.with_params(f=float(vec[0]), k=tuple(vec[1:1 + nd]),
                           cx=float(vec[1 + nd]), cy=float(vec[2 + nd]))


def _stage_intrinsic_mask(stage: BaStage, nd: int) -> np.ndarray:
    m = np.zeros(3 + nd, dtype=bool)
    m[0] = stage.focal
    m[1:1 + nd] = stage.distortion
    m[1 + nd:] = stage.principal_point
    return m


class _Layout:
    """Index bookkeeping for active camera-side parameters of one stage."""

    def __init__(self, problem: BaProblem, stage: BaStage):
        nd = problem.cameras[0].kind.n_dist
        for cam in problem.cameras:
            if cam.kind.n_dist != nd:
                raise ValueError("mixed distortion sizes in one problem")
        self.nd = nd
        self.intr_mask = _stage_intrinsic_mask(stage, nd)
        self.k_full = 6 + 3 + nd  # pose(6) + intrinsics(3+nd)
        # column mask of the per-view full jacobian that the stage activates
        col = np.zeros(self.k_full, dtype=bool)
        col[:6] = stage.extrinsics
        col[6:] = self.intr_mask
        self.stage_cols = col
        self.k_act = int(col.sum())
        # per-view global activity (fixed blocks switch whole groups off)
        act = np.zeros((problem.n_views, self.k_full), dtype=bool)
        for v in range(problem.n_views):
            a = col.copy()
            if v in problem.fixed_poses:
                a[:6] = False
            if v in problem.fixed_cameras:
                a[6:] = False
            act[v] = a
        if problem.gauge_translation is not None:
            v, coord = problem.gauge_translation
            act[v, 3 + coord] = False
        self.view_active = act         # (V, k_full)
        self.active_cols = act[:, col] if self.k_act else np.zeros((problem.n_views, 0), bool)
        self.cam_active_flat = self.active_cols.reshape(-1)  # (V * k_act,)


def _assemble(problem: BaProblem, stage: BaStage, layout: _Layout, valid_mask: np.ndarray,
              cauchy_scale: float | None):
    """Residuals and block Jacobians for the active observations.

    Returns (cost, r_w (M,2), Jc_w (M,2,k_act), Jp_w (M,2,3), obs_idx (M,)).
    Weighted by the square-rooted Cauchy weights.
    """
    V = problem.n_views
    n = problem.n_obs
    k_act = layout.k_act
    obs_ok = valid_mask
    M = int(obs_ok.sum())
    r = np.zeros((M, 2))
    Jc = np.zeros((M, 2, k_act))
    Jp = np.zeros((M, 2, 3))
    pos = np.zeros(n, dtype=int)
    pos[obs_ok] = np.arange(M)
    for v in range(V):
        sel = (problem.obs_view == v) & obs_ok
        if not np.any(sel):
            continue
        cam, pose = problem.cameras[v], problem.poses[v]
        pts = problem.points[problem.obs_point[sel]]
        pix, status, J_xc, J_intr = project_with_jacobians(cam, pose, pts)
        if np.any(status != OK):
            raise NumericalFailure("observation became invalid during assembly")
        rows = pos[sel]
        r[rows] = pix - problem.obs_pixel[sel]
        R = pose.R
        rot_pts = pts @ R.T  # R @ X without translation
        # d xc / d (rot increment) = -skew(R X) ; d xc / d t = I
        J_pose = np.zeros((len(pts), 2, 6))
        sk = np.zeros((len(pts), 3, 3))
        sk[:, 0, 1] = -rot_pts[:, 2]
        sk[:, 0, 2] = rot_pts[:, 1]
        sk[:, 1, 0] = rot_pts[:, 2]
        sk[:, 1, 2] = -rot_pts[:, 0]
        sk[:, 2, 0] = -rot_pts[:, 1]
        sk[:, 2, 1] = rot_pts[:, 0]
        J_pose[:, :, :3] = np.einsum("nij,njk->nik", J_xc, -sk)
        J_pose[:, :, 3:] = J_xc
        full = np.concatenate([J_pose, J_intr], axis=2)
        Jc[rows] = full[:, :, layout.stage_cols]
        Jp[rows] = np.einsum("nij,jk->nik", J_xc, R)
    z = np.sum(r * r, axis=1)
    if cauchy_scale is None:
        cost = float(np.sum(z))
        w = np.ones(M)
    else:
        cost = float(np.sum(cauchy_cost(z, cauchy_scale)))
        w = np.sqrt(cauchy_weight(z, cauchy_scale))
    r_w = r * w[:, None]
    Jc_w = Jc * w[:, None, None]
    Jp_w = Jp * w[:, None, None]
    return cost, r_w, Jc_w, Jp_w, np.flatnonzero(obs_ok)


def _evaluate_cost(problem: BaProblem, valid_mask: np.ndarray, cauchy_scale: float | None) -> float:
    total = 0.0
    for v in range(problem.n_views):
        sel = (problem.obs_view == v) & valid_mask
        if not np.any(sel):
            continue
        pix, status = project_points(problem.cameras[v], problem.poses[v],
                                     problem.points[problem.obs_point[sel]])
        if np.any(status != OK):
            return math.inf
        z = np.sum((pix - problem.obs_pixel[sel]) ** 2, axis=1)
        if cauchy_scale is None:
            total += float(np.sum(z))
        else:
            total += float(np.sum(cauchy_cost(z, cauchy_scale)))
    return total


def _apply_step(problem: BaProblem, stage: BaStage, layout: _Layout,
                delta_cam: np.ndarray, delta_pts: np.ndarray | None) -> BaProblem:
    poses = list(problem.poses)
    cameras = list(problem.cameras)
    for v in range(problem.n_views):
        d_full = np.zeros(layout.k_full)
        d_full[layout.stage_cols] = delta_cam[v]
        d_full[~layout.view_active[v]] = 0.0
        if stage.extrinsics and v not in problem.fixed_poses:
            pose = poses[v]
            q = quat_multiply(quat_exp(d_full[:3]), pose.q)
            t = pose.t + d_full[3:6]
            poses[v] = ViewPose(q, t)
        if v not in problem.fixed_cameras and layout.intr_mask.any():
            vec = _intrinsic_vector(cameras[v]) + d_full[6:]
            cameras[v] = _camera_from_vector(cameras[v], vec)
    pts = problem.points
    if delta_pts is not None:
        pts = pts + delta_pts
    return replace(problem, cameras=cameras, poses=poses, points=pts)


@dataclass
class SolveReport:
    cost_trace: list            # (iteration, cost, accepted, lambda)
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    underdetermined: bool
    excluded_observations: int


def solve(problem: BaProblem, stage: BaStage, cauchy_scale: float | None = 1.0,
          ftol: float = 1e-8, gtol: float = 1e-10) -> tuple[BaProblem, SolveReport]:
    """Run one LM stage on the problem; returns the updated problem and a report.

    Observations whose projection is invalid at the initial state are excluded
    from this solve. Candidate steps that invalidate a previously valid
    observation are rejected through an infinite trial cost.
    """
    layout = _Layout(problem, stage)
    errs = reprojection_errors(problem)
    valid = np.isfinite(errs)
    excluded = int(np.sum(~valid))
    n_res = 2 * int(valid.sum())
    n_par = int(layout.cam_active_flat.sum()) + (3 * len(problem.points) if stage.points else 0)
    underdetermined = n_par > n_res
    if n_res == 0:
        raise NumericalFailure("no valid observations to optimize")

    cost = _evaluate_cost(problem, valid, cauchy_scale)
    if not math.isfinite(cost):
        raise NumericalFailure("non-finite initial cost")
    initial_cost = cost
    trace = []
    lam = 1e-4
    it = 0
    converged = False
    V = problem.n_views
    k = layout.k_act

    need_assemble = True
    while it < stage.max_iterations:
        if need_assemble:
            _, r_w, Jc_w, Jp_w, obs_idx = _assemble(problem, stage, layout, valid, cauchy_scale)
            ov = problem.obs_view[obs_idx]
            op = problem.obs_point[obs_idx]
            g_c = np.zeros((V, k))
            if k:
                np.add.at(g_c, ov, np.einsum("nij,ni->nj", Jc_w, r_w))
            if stage.points:
                P = len(problem.points)
                g_p = np.zeros((P, 3))
                np.add.at(g_p, op, np.einsum("nij,ni->nj", Jp_w, r_w))
            grad_inf = float(np.max(np.abs(g_c[layout.active_cols]), initial=0.0)) if k else 0.0
            if stage.points:
                grad_inf = max(grad_inf, float(np.max(np.abs(g_p), initial=0.0)))
            if grad_inf < gtol:
                converged = True
                break
            U = np.zeros((V, k, k))
            if k:
                np.add.at(U, ov, np.einsum("nij,nik->njk", Jc_w, Jc_w))
            if stage.points:
                Vb = np.zeros((P, 3, 3))
                np.add.at(Vb, op, np.einsum("nij,nik->njk", Jp_w, Jp_w))
                W = np.einsum("nij,nik->njk", Jc_w, Jp_w) if k else None  # (M, k, 3)
            need_assemble = False

        it += 1
        # damped camera system, points eliminated by Schur complement
        delta_cam, delta_pts = _lm_step(problem, stage, layout, lam, U, g_c,
                                        Vb if stage.points else None,
                                        g_p if stage.points else None,
                                        W if stage.points else None, ov, op)
        if delta_cam is None:
            new_cost = math.inf
        else:
            candidate = _apply_step(problem, stage, layout, delta_cam, delta_pts)
            try:
                new_cost = _evaluate_cost(candidate, valid, cauchy_scale)
            except Exception:
                new_cost = math.inf
        if math.isfinite(new_cost) and new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            problem = candidate
            cost = new_cost
            trace.append((it, cost, True, lam))
            lam /= 3.0
            need_assemble = True
            if rel < ftol:
                converged = True
                break
        else:
            trace.append((it, cost, False, lam))
            lam *= 10.0
            if lam > 1e32:
                converged = True
                break

    report = SolveReport(cost_trace=trace, initial_cost=initial_cost, final_cost=cost,
                         iterations=it, converged=converged,
                         underdetermined=underdetermined, excluded_observations=excluded)
    return problem, report


def _lm_step(problem, stage, layout, lam, U, g_c, Vb, g_p, W, ov, op):
    """One damped normal-equation solve; returns (delta_cam (V,k), delta_pts)."""
    V = problem.n_views
    k = layout.k_act
    P = len(problem.points) if stage.points else 0

    if stage.points:
        dV = np.zeros_like(Vb)
        dgv = np.einsum("pii->pi", Vb)
        for i in range(3):
            dV[:, i, i] = lam * (dgv[:, i] + 1e-8)
        Vd = Vb + dV
        try:
            Vinv = np.linalg.inv(Vd)
        except np.linalg.LinAlgError:
            return None, None

    if k == 0:
        if not stage.points:
            return None, None
        delta_pts = -np.einsum("pij,pj->pi", Vinv, g_p)
        return np.zeros((V, 0)), delta_pts

    S = np.zeros((V, V, k, k))
    for v in range(V):
        dU = np.diag(lam * (np.diag(U[v]) + 1e-8))
        S[v, v] = U[v] + dU
    rhs = -g_c.copy()

    if stage.points and len(op):
        Y = np.einsum("nij,njk->nik", W, Vinv[op])  # (M, k, 3)
        np.add.at(rhs, ov, np.einsum("nij,nj->ni", Y, g_p[op]))
        # group observations by point to form the Y_a W_b^T couplings; loop
        # over slot pairs to keep the temporaries small
        order = np.argsort(op, kind="stable")
        sorted_op = op[order]
        counts = np.bincount(sorted_op, minlength=P)
        starts = np.concatenate([[0], np.cumsum(counts)])
        uniq_counts = np.unique(counts[counts > 0])
        for m in uniq_counts:
            pts_m = np.flatnonzero(counts == m)
            if len(pts_m) == 0:
                continue
            idx = np.stack([order[starts[p]:starts[p] + m] for p in pts_m])  # (Pm, m)
            va = ov[idx]  # (Pm, m)
            for a in range(m):
                Ya = Y[idx[:, a]]  # (Pm, k, 3)
                for b in range(m):
                    contrib = np.einsum("pkc,pjc->pkj", Ya, W[idx[:, b]])
                    np.subtract.at(S, (va[:, a], va[:, b]), contrib)

    S_full = S.transpose(0, 2, 1, 3).reshape(V * k, V * k)
    rhs_full = rhs.reshape(V * k)
    mask = layout.cam_active_flat
    if not mask.any():
        delta_cam = np.zeros((V, k))
    else:
        A = S_full[np.ix_(mask, mask)]
        b = rhs_full[mask]
        try:
            sol = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            return None, None
        if not np.all(np.isfinite(sol)):
            return None, None
        flat = np.zeros(V * k)
        flat[mask] = sol
        delta_cam = flat.reshape(V, k)

    delta_pts = None
    if stage.points:
        delta_pts = np.zeros((P, 3))
        rhs_p = -g_p.copy()
        if len(op):
            np.add.at(rhs_p, op, -np.einsum("nij,ni->nj", W, delta_cam[ov]))
        delta_pts = np.einsum("pij,pj->pi", Vinv, rhs_p)
        if not np.all(np.isfinite(delta_pts)):
            return None, None
    return delta_cam, delta_pts


def remove_outliers(problem: BaProblem, b_err: float) -> tuple[BaProblem, int]:
    """Drop observations with reprojection error above ``b_err`` (pixels).

    Points left with fewer than two observations are deleted along with their
    remaining observations. Returns the pruned problem and the number of
    observations removed. Invalid projections count as infinite error.
    """
    if not (b_err > 0):
        raise ValueError("b_err must be positive")
    errs = reprojection_errors(problem)
    keep = errs <= b_err
    removed = int(np.sum(~keep))
    obs_view = problem.obs_view[keep]
    obs_point = problem.obs_point[keep]
    obs_pixel = problem.obs_pixel[keep]
    counts = np.bincount(obs_point, minlength=len(problem.points))
    live = counts >= 2
    keep2 = live[obs_point]
    removed += int(np.sum(~keep2))
    obs_view = obs_view[keep2]
    obs_point = obs_point[keep2]
    obs_pixel = obs_pixel[keep2]
    new_index = -np.ones(len(problem.points), dtype=int)
    new_index[live] = np.arange(int(live.sum()))
    problem2 = replace(
        problem,
        points=problem.points[live],
        obs_view=obs_view,
        obs_point=new_index[obs_point],
        obs_pixel=obs_pixel,
        point_ids=problem.point_ids[live] if problem.point_ids is not None else None,
    )
    return problem2, removed


def dense_jacobian(problem: BaProblem, stage: BaStage) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw residuals and dense Jacobian over the stage's active parameters.

    Parameter order: per view [rot(3), t(3), f, k.., cx, cy] restricted to the
    stage's active columns and unfixed blocks, then point coordinates if the
    stage refines points. Intended for finite-difference verification and
    small problems only. Returns (residuals, jacobian, valid_obs_mask).
    """
    layout = _Layout(problem, stage)
    errs = reprojection_errors(problem)
    valid = np.isfinite(errs)
    _, r_w, Jc_w, Jp_w, obs_idx = _assemble(problem, stage, layout, valid, None)
    M = len(obs_idx)
    n_cam = int(layout.cam_active_flat.sum())
    n_pts = 3 * len(problem.points) if stage.points else 0
    J = np.zeros((2 * M, n_cam + n_pts))
    r = r_w.reshape(-1)
    col_of = -np.ones(problem.n_views * layout.k_act, dtype=int)
    col_of[layout.cam_active_flat] = np.arange(n_cam)
    for n in range(M):
        v = problem.obs_view[obs_idx[n]]
        base = v * layout.k_act
        for j in range(layout.k_act):
            c = col_of[base + j]
            if c >= 0:
                J[2 * n:2 * n + 2, c] = Jc_w[n, :, j]
        if stage.points:
            p = problem.obs_point[obs_idx[n]]
            J[2 * n:2 * n + 2, n_cam + 3 * p:n_cam + 3 * p + 3] = Jp_w[n]
    return r, J, valid


def apply_parameter_increment(problem: BaProblem, stage: BaStage, delta: np.ndarray) -> BaProblem:
    """Apply a dense-parameter increment in the ``dense_jacobian`` chart."""
    layout = _Layout(problem, stage)
    n_cam = int(layout.cam_active_flat.sum())
    flat = np.zeros(problem.n_views * layout.k_act)
    flat[layout.cam_active_flat] = delta[:n_cam]
    delta_cam = flat.reshape(problem.n_views, layout.k_act)
    delta_pts = None
    if stage.points:
        delta_pts = delta[n_cam:].reshape(-1, 3)
    return _apply_step(problem, stage, layout, delta_cam, delta_pts)
