"""Incremental and global reconstruction pipelines.

Both pipelines share the preprocessing: per-pair correspondence summaries,
robust fundamental matrices, focal self-calibration, cycle closure and
hierarchical sampling, track merging and the symmetric-epipolar gate. The
incremental pipeline then orders views by three-cycle scores, brute-forces
the initial pair, and registers one view at a time with staged bundle
adjustment; the global pipeline ingests externally estimated poses,
triangulates everything robustly, and refines in parameter-activation
stages (extrinsics, then focal, then distortion, then principal point).
"""

from __future__ import annotations

import itertools
import json
import math
import struct
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import ba
from .geometry import (
    OK,
    CameraKind,
    CameraModel,
    DegenerateGeometry,
    EpipolarPair,
    GeometryError,
    ViewPose,
    essential_from_fundamental,
    decompose_essential,
    project_points,
    symmetric_epipolar_distance,
    triangulate_dlt,
    unproject_points,
)
from .robustest import (
    DegenerateEstimate,
    EstimationError,
    InsufficientInliers,
    RansacConfig,
    Thresholds,
    TriangulationFailed,
    absolute_pose,
    estimate_fundamental,
    triangulate_robust,
)
from .sampling import (
    FINE_CELL,
    CycleTrack,
    SamplingConfig,
    ScoreParams,
    sample_cycles,
    score_angle,
)
from .selfcal import FocalPair, FocalProblem, init_focals
from .warpio import (
    ViewSetManifest,
    load_warps,
    read_manifest,
    read_pose_file,
    warp_resolution,
    warp_to_image,
    write_pose_file,
)


class PipelineError(RuntimeError):
    pass


class InitFailed(PipelineError):
    """No usable initial pair."""


class MissingInit(PipelineError):
    """Global mode without initial poses."""


class AllDegenerate(InitFailed):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "incremental"            # "incremental" | "global"
    camera_kind: CameraKind = CameraKind.PINHOLE_RADIAL
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    score: ScoreParams = field(default_factory=ScoreParams)
    thresholds: Thresholds = field(default_factory=Thresholds)
    ransac_f: RansacConfig = field(default_factory=RansacConfig.for_fundamental)
    ransac_pose: RansacConfig = field(default_factory=RansacConfig.for_absolute_pose)
    brute_force: bool = True             # incremental only
    refine_principal_point: bool = False
    refine_camera_type: bool = False
    seed: int = 0
    iters_register: int = 100            # new-view pose+intrinsics refine
    iters_incremental_ba: int = 100      # the two per-view global BAs
    iters_final_ba: int = 100
    iters_global_extrinsics: int = 300
    iters_global_focal: int = 200
    iters_global_distortion: int = 200
    iters_escalation: int = 100
    cauchy_scale: float = 1.0            # robustification scale, pixels

    def __post_init__(self):
        if self.mode not in ("incremental", "global"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "global" and self.brute_force:
            # brute-force pair selection only exists in the incremental flow
            object.__setattr__(self, "brute_force", False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["camera_kind"] = self.camera_kind.value
        return d

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        d = dict(d)
        d["camera_kind"] = CameraKind(d["camera_kind"])
        d["sampling"] = SamplingConfig(**d["sampling"])
        d["score"] = ScoreParams(**d["score"])
        d["thresholds"] = Thresholds(**d["thresholds"])
        d["ransac_f"] = RansacConfig(**d["ransac_f"])
        d["ransac_pose"] = RansacConfig(**d["ransac_pose"])
        return PipelineConfig(**d)


@dataclass(eq=False)
class Track:
    """Merged multi-view correspondence in image-pixel coordinates."""

    obs: dict                 # view_id -> np.ndarray (2,)
    score: float
    max_order: int
    point: np.ndarray | None = None   # world coordinates once triangulated


@dataclass
class Reconstruction:
    view_ids: list
    cameras: dict             # view_id -> CameraModel (estimate, all views)
    poses: dict               # view_id -> ViewPose (registered views only)
    tracks: list              # [Track]
    order: list               # registration order
    anchor: str | None
    thresholds: Thresholds
    failures: dict = field(default_factory=dict)   # view_id -> reason
    stage_reports: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    @property
    def registered(self) -> list:
        return [v for v in self.order if v in self.poses]

    def live_points(self) -> list:
        return [(k, t) for k, t in enumerate(self.tracks) if t.point is not None]


@dataclass
class PairGeometry:
    i: str                    # canonical: manifest order, i before j
    j: str
    F: np.ndarray
    match_count: int
    rel: ViewPose | None      # pose of j in i's frame, unit baseline
    homography_degenerate: bool = False
    inlier_i: np.ndarray | None = None   # image coords of the F inliers
    inlier_j: np.ndarray | None = None


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def _pair_seed(seed: int, si: int, sj: int, tag: int) -> int:
    return int(np.random.SeedSequence((seed, si, sj, tag)).generate_state(1)[0])


def _stage1_pair_correspondences(field_, min_confidence: float, rng: np.random.Generator):
    """One random valid pixel per 5x5 fine cell of a warp; warp coordinates."""
    valid = field_.confidence > max(0.0, min_confidence)
    ys, xs = np.nonzero(valid)
    if len(xs) == 0:
        return np.zeros((0, 2)), np.zeros((0, 2))
    nx = (field_.width + FINE_CELL - 1) // FINE_CELL
    cells = (xs // FINE_CELL) + nx * (ys // FINE_CELL)
    perm = rng.permutation(len(cells))
    _, first = np.unique(cells[perm], return_index=True)
    pick = perm[first]
    src = np.stack([xs[pick], ys[pick]], axis=1).astype(float)
    dst = field_.target[ys[pick], xs[pick]]
    return src, dst


class _Preprocessed:
    """Everything the pipelines share before any pose exists."""

    def __init__(self, manifest: ViewSetManifest, config: PipelineConfig):
        self.manifest = manifest
        self.config = config
        self.view_ids = manifest.view_ids
        self.warps = load_warps(manifest)
        self.scales = {}
        self.resolutions = {}
        for vid in self.view_ids:
            w, h = warp_resolution(self.warps, vid)
            self.resolutions[vid] = (w, h)
            spec = manifest.view(vid)
            self.scales[vid] = (spec.width / w, spec.height / h)
        self.pair_geoms: dict = {}
        self.cameras: dict = {}
        self.tracks: list = []
        self.survivors: dict = {}
        self.counts: dict = {}

    def view_index(self, vid: str) -> int:
        return self.view_ids.index(vid)

    def to_image(self, vid: str, pts: np.ndarray) -> np.ndarray:
        return warp_to_image(pts, self.scales[vid])

    # -- two-view geometry ---------------------------------------------------

    def estimate_pair_geometries(self):
        cfg = self.config
        for a, b in itertools.combinations(range(len(self.view_ids)), 2):
            vi, vj = self.view_ids[a], self.view_ids[b]
            if (vi, vj) in self.warps:
                field_, flip = self.warps[(vi, vj)], False
            elif (vj, vi) in self.warps:
                field_, flip = self.warps[(vj, vi)], True
            else:
                continue
            rng = np.random.default_rng(_pair_seed(cfg.seed, a, b, 0x51))
            src, dst = _stage1_pair_correspondences(field_, cfg.sampling.min_confidence, rng)
            if flip:
                src, dst = dst, src
            if len(src) < 8:
                continue
            x_i = self.to_image(vi, src)
            x_j = self.to_image(vj, dst)
            rcfg = replace(cfg.ransac_f, seed=_pair_seed(cfg.seed, a, b, 0xF0))
            try:
                res = estimate_fundamental(x_i, x_j, rcfg)
            except (DegenerateEstimate, ValueError):
                continue
            self.pair_geoms[(vi, vj)] = PairGeometry(
                i=vi, j=vj, F=res.F, match_count=res.match_count, rel=None,
                homography_degenerate=res.homography_degenerate,
                inlier_i=x_i[res.inliers], inlier_j=x_j[res.inliers])

    def calibrate_focals(self):
        pairs = [FocalPair(g.i, g.j, g.F, g.match_count) for g in self.pair_geoms.values()]
        sizes = {}
        for vid in self.view_ids:
            spec = self.manifest.view(vid)
            sizes[vid] = (spec.width, spec.height)
        focals = {}
        self.focal_converged = True
        if pairs:
            constrained = {v for p in pairs for v in (p.i, p.j)}
            sub = {v: sizes[v] for v in constrained}
            sol = init_focals(FocalProblem(pairs=pairs, image_sizes=sub))
            focals.update(sol.focals)
            self.focal_converged = sol.converged
        for vid in self.view_ids:
            w, h = sizes[vid]
            f = focals.get(vid, 1.2 * max(w, h))
            k = (0.0,) * self.config.camera_kind.n_dist
            self.cameras[vid] = CameraModel(self.config.camera_kind, f,
                                            (w - 1) / 2.0, (h - 1) / 2.0, k, w, h)

    def decompose_pairs(self):
        """Relative poses from E = K_j^T F K_i for every estimated pair.

        E from noisy F and approximate focals rarely has an exact essential
        signature, so it is first projected onto the essential manifold
        (singular values replaced by (1, 1, 0)).
        """
        for key, g in self.pair_geoms.items():
            cam_i, cam_j = self.cameras[g.i], self.cameras[g.j]
            try:
                E = essential_from_fundamental(
                    EpipolarPair(F=g.F, match_count=g.match_count), cam_i.K, cam_j.K)
                u, _, vt = np.linalg.svd(E)
                E = u @ np.diag([1.0, 1.0, 0.0]) @ vt
                bi, ok_i = unproject_points(cam_i, g.inlier_i)
                bj, ok_j = unproject_points(cam_j, g.inlier_j)
                use = ok_i & ok_j
                if use.sum() < 5:
                    continue
                rel, _ = decompose_essential(E, bi[use], bj[use])
                g.rel = rel
            except (GeometryError, ValueError):
                continue

    # -- scoring -------------------------------------------------------------

    def _rel_pose(self, vi: str, vj: str, poses: dict | None):
        """Relative pose of vj w.r.t. vi from given poses or pair geometry."""
        if poses is not None:
            if vi in poses and vj in poses:
                return poses[vj].compose(poses[vi].inverse())
            return None
        key = (vi, vj) if (vi, vj) in self.pair_geoms else None
        if key is None:
            key = (vj, vi) if (vj, vi) in self.pair_geoms else None
            if key is None or self.pair_geoms[key].rel is None:
                return None
            return self.pair_geoms[key].rel.inverse()
        g = self.pair_geoms[key]
        return g.rel

    def make_score_fn(self, poses: dict | None):
        """Vectorized batch scorer over cycle tracks.

        Pair triangulation angles come from two-view geometry (incremental,
        ``poses=None``) or from the provided global poses. Tracks with no
        triangulable pair score 1, degrading to coverage-only sampling.
        """
        params = self.config.score
        if params.top_k == 0:
            return lambda tracks: np.ones(len(tracks))

        bearing_cache: dict = {}

        def bearings_for(view, pix_warp):
            cam = self.cameras[view]
            img = self.to_image(view, pix_warp)
            b, ok = unproject_points(cam, img)
            return b, ok

        def score_batch(tracks):
            n = len(tracks)
            buckets: dict = {}
            for ti, t in enumerate(tracks):
                obs = t.observations
                for x in range(len(obs)):
                    for y in range(x + 1, len(obs)):
                        va, pa = obs[x]
                        vb, pb = obs[y]
                        buckets.setdefault((va, vb), []).append((ti, pa, pb))
            per_track: list = [[] for _ in range(n)]
            for (va, vb), items in buckets.items():
                rel = self._rel_pose(va, vb, poses)
                if rel is None:
                    continue
                pa = np.stack([it[1] for it in items])
                pb = np.stack([it[2] for it in items])
                ba_, ok_a = bearings_for(va, pa)
                bb_, ok_b = bearings_for(vb, pb)
                ok = ok_a & ok_b
                R, tvec = rel.R, rel.t
                rb = ba_ @ R.T
                a11 = np.sum(rb * rb, axis=1)
                a12 = -np.sum(rb * bb_, axis=1)
                a22 = np.sum(bb_ * bb_, axis=1)
                b1 = -(rb @ tvec)
                b2 = bb_ @ tvec
                det = a11 * a22 - a12 * a12
                with np.errstate(divide="ignore", invalid="ignore"):
                    li = (a22 * b1 - a12 * b2) / det
                    lj = (a11 * b2 - a12 * b1) / det
                ok &= np.isfinite(li) & np.isfinite(lj) & (li > 0) & (lj > 0)
                X = li[:, None] * ba_                      # in va's frame
                cj = rel.center()
                ri = -X
                rj = cj - X
                ni = np.linalg.norm(ri, axis=1)
                nj = np.linalg.norm(rj, axis=1)
                ok &= (ni > 1e-12) & (nj > 1e-12)
                with np.errstate(invalid="ignore", divide="ignore"):
                    cosang = np.sum(ri * rj, axis=1) / (ni * nj)
                ang = np.arccos(np.clip(cosang, -1.0, 1.0))
                sc = np.where(ok, score_angle(np.where(ok, ang, 0.5), params), np.nan)
                for (ti, _, _), s in zip(items, sc):
                    if np.isfinite(s):
                        per_track[ti].append(float(s))
            out = np.ones(n)
            for ti in range(n):
                ps = per_track[ti]
                if ps:
                    ps.sort(reverse=True)
                    out[ti] = sum(ps[: min(params.top_k, len(ps))])
            return out

        return score_batch

    # -- sampling, merging, filtering -----------------------------------------

    def sample_tracks(self, poses: dict | None):
        cfg = self.config
        score_fn = self.make_score_fn(poses)
        selected = sample_cycles(self.warps, cfg.sampling, self.resolutions,
                                 self.view_ids, score_fn,
                                 collect_survivors=self.survivors)
        self.counts["selected"] = len(selected)
        merged = self.merge_tracks(selected)
        self.counts["merged"] = len(merged)
        kept = self.filter_tracks_epipolar(merged)
        self.counts["after_epipolar"] = len(kept)
        self.tracks = kept

    def merge_tracks(self, selected: list) -> list:
        """Union cycle tracks sharing a rounded observation into one track."""
        parent: dict = {}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        def union(x, y):
            rx, ry = find(x), find(y)
            if rx != ry:
                parent[ry] = rx

        def keys_of(t: CycleTrack):
            out = []
            for v, p in t.observations:
                out.append((v, int(math.floor(p[0] + 0.5)), int(math.floor(p[1] + 0.5))))
            return out

        # deterministic processing order: higher order, then higher score
        ordered = sorted(selected, key=lambda t: (-t.order, -t.score, t.views,
                                                  t.source_pixel[1], t.source_pixel[0]))
        for t in ordered:
            ks = keys_of(t)
            for k in ks:
                parent.setdefault(k, k)
            for k in ks[1:]:
                union(ks[0], k)

        groups: dict = {}
        for t in ordered:
            root = find(keys_of(t)[0])
            groups.setdefault(root, []).append(t)

        merged = []
        for root in groups:
            members = groups[root]
            obs: dict = {}
            for t in members:  # first writer per view wins (highest order/score)
                for v, p in t.observations:
                    if v not in obs:
                        obs[v] = self.to_image(v, np.asarray(p, dtype=float))
            merged.append(Track(obs=obs,
                                score=max(t.score for t in members),
                                max_order=max(t.order for t in members)))
        merged.sort(key=lambda t: (sorted(t.obs),
                                   tuple(np.round(t.obs[sorted(t.obs)[0]], 6))))
        return merged

    def filter_tracks_epipolar(self, tracks: list) -> list:
        """Drop tracks with any observation pair beyond the F_err gate."""
        f_err = self.config.thresholds.f_err
        if not math.isfinite(f_err):
            return tracks
        kept = []
        for t in tracks:
            views = sorted(t.obs)
            ok = True
            for a in range(len(views)):
                for b in range(a + 1, len(views)):
                    vi, vj = views[a], views[b]
                    key = (vi, vj) if (vi, vj) in self.pair_geoms else None
                    flipped = False
                    if key is None:
                        key = (vj, vi) if (vj, vi) in self.pair_geoms else None
                        flipped = True
                    if key is None:
                        continue
                    F = self.pair_geoms[key].F
                    xi = t.obs[vj] if flipped else t.obs[vi]
                    xj = t.obs[vi] if flipped else t.obs[vj]
                    d = symmetric_epipolar_distance(F, xi[None, :], xj[None, :])[0]
                    if d > f_err:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                kept.append(t)
        return kept

    def triple_scores(self) -> dict:
        """Summed three-cycle scores per view triple, from stage-1 survivors."""
        scores: dict = {}
        for (view, order), tracks in self.survivors.items():
            if order != 3:
                continue
            for t in tracks:
                key = frozenset(t.views)
                scores[key] = scores.get(key, 0.0) + t.score
        return scores


# ---------------------------------------------------------------------------
# view ordering and the initial pair
# ---------------------------------------------------------------------------


def select_view_order(triple_scores: dict, views: list) -> tuple:
    """Greedy view ordering by summed three-cycle scores.

    Starts from the best triple, then repeatedly appends the view whose new
    triples with the already-selected set add the most score. Views sharing
    no scored triple with the selected set are reported as disconnected.
    """
    if len(views) < 3 or not triple_scores:
        return list(views), []
    best = max(sorted(triple_scores, key=lambda k: tuple(sorted(k))),
               key=lambda k: triple_scores[k])
    order = sorted(best)
    remaining = [v for v in views if v not in best]
    while remaining:
        gains = []
        for v in remaining:
            gain = 0.0
            seen = False
            for x in range(len(order)):
                for y in range(x + 1, len(order)):
                    key = frozenset((v, order[x], order[y]))
                    if key in triple_scores:
                        gain += triple_scores[key]
                        seen = True
            gains.append((gain, seen, v))
        gains.sort(key=lambda g: (-g[0], g[2]))
        gain, seen, v = gains[0]
        if not seen:
            break
        order.append(v)
        remaining.remove(v)
    return order, remaining


def select_initial_pair(triple: list, pre: _Preprocessed, brute_force: bool = True) -> tuple:
    """Pick the starting pair inside the initial triple.

    Brute force evaluates all three pairs by mean two-view reprojection
    distance divided by the number of points passing cheirality (squared in
    the denominator, favoring well-populated pairs). Without brute force the
    pair with the highest summed track score wins.
    """
    pairs = [(triple[a], triple[b]) for a in range(3) for b in range(a + 1, 3)
             if len(triple) >= 3] or [tuple(triple[:2])]
    candidates = []
    for vi, vj in pairs:
        key = (vi, vj) if (vi, vj) in pre.pair_geoms else None
        flip = False
        if key is None:
            key = (vj, vi) if (vj, vi) in pre.pair_geoms else None
            flip = True
        if key is None or pre.pair_geoms[key].rel is None:
            continue
        g = pre.pair_geoms[key]
        ci, cj = (g.i, g.j)
        cost, n_pos, score_sum = _pair_cost(ci, cj, g, pre)
        if n_pos < 10:
            continue
        candidates.append((cost, -score_sum, ci, cj))
    if not candidates:
        raise AllDegenerate("no initial pair triangulates at least 10 points")
    if brute_force:
        candidates.sort(key=lambda c: (c[0], c[2], c[3]))
    else:
        candidates.sort(key=lambda c: (c[1], c[2], c[3]))
    _, _, ci, cj = candidates[0]
    return ci, cj


def _pair_cost(vi: str, vj: str, g: PairGeometry, pre: _Preprocessed):
    """Eq-style pair cost: (sum of reprojection distances) / N^2 over
    points in front of both cameras; also the summed track score."""
    cam_i, cam_j = pre.cameras[vi], pre.cameras[vj]
    rel = g.rel
    pix_i, pix_j, scores = [], [], []
    for t in pre.tracks:
        if vi in t.obs and vj in t.obs:
            pix_i.append(t.obs[vi])
            pix_j.append(t.obs[vj])
            scores.append(t.score)
    if not pix_i:
        return math.inf, 0, 0.0
    pix_i = np.stack(pix_i)
    pix_j = np.stack(pix_j)
    bi, ok_i = unproject_points(cam_i, pix_i)
    bj, ok_j = unproject_points(cam_j, pix_j)
    ok = ok_i & ok_j
    R, tvec = rel.R, rel.t
    rb = bi @ R.T
    a11 = np.sum(rb * rb, axis=1)
    a12 = -np.sum(rb * bj, axis=1)
    a22 = np.sum(bj * bj, axis=1)
    b1 = -(rb @ tvec)
    b2 = bj @ tvec
    det = a11 * a22 - a12 * a12
    with np.errstate(divide="ignore", invalid="ignore"):
        li = (a22 * b1 - a12 * b2) / det
        lj = (a11 * b2 - a12 * b1) / det
    pos = ok & np.isfinite(li) & np.isfinite(lj) & (li > 0) & (lj > 0)
    n_pos = int(pos.sum())
    if n_pos == 0:
        return math.inf, 0, float(np.sum(scores))
    X = li[pos, None] * bi[pos]
    pi_hat, st_i = project_points(cam_i, ViewPose.identity(), X)
    pj_hat, st_j = project_points(cam_j, rel, X)
    d_i = np.linalg.norm(pi_hat - pix_i[pos], axis=1)
    d_j = np.linalg.norm(pj_hat - pix_j[pos], axis=1)
    d = np.where((st_i == OK) & (st_j == OK), 0.5 * (d_i + d_j), np.nan)
    d = d[np.isfinite(d)]
    if len(d) == 0:
        return math.inf, 0, float(np.sum(scores))
    cost = float(np.sum(d)) / (n_pos * n_pos)
    return cost, n_pos, float(np.sum(scores))


# ---------------------------------------------------------------------------
# bundle-adjustment glue
# ---------------------------------------------------------------------------


def _build_problem(rec: Reconstruction, pre: _Preprocessed, only_view: str | None = None):
    """BaProblem over registered views and triangulated tracks."""
    reg = rec.registered
    if only_view is not None:
        reg = [only_view]
    vidx = {v: k for k, v in enumerate(reg)}
    pts, ids = [], []
    ov, op, opix = [], [], []
    for k, t in enumerate(rec.tracks):
        if t.point is None:
            continue
        row = len(pts)
        used = False
        for v, pix in sorted(t.obs.items()):
            if v in vidx:
                ov.append(vidx[v])
                op.append(row)
                opix.append(pix)
                used = True
        if used:
            pts.append(t.point)
            ids.append(k)
        else:
            continue
    if not pts:
        raise ba.NumericalFailure("no triangulated tracks to adjust")
    anchor_idx = 0 if only_view is None else None
    gauge = None
    if only_view is None and len(reg) >= 2:
        anchor_pose = rec.poses[reg[0]]
        if float(np.linalg.norm(anchor_pose.t)) < 1e-9:
            coord = int(np.argmax(np.abs(rec.poses[reg[1]].t)))
            gauge = (1, coord)
    problem = ba.BaProblem(
        cameras=[rec.cameras[v] for v in reg],
        poses=[rec.poses[v] for v in reg],
        points=np.asarray(pts),
        obs_view=np.asarray(ov, dtype=int),
        obs_point=np.asarray(op, dtype=int),
        obs_pixel=np.asarray(opix),
        fixed_poses=frozenset() if only_view is not None else frozenset([0]),
        gauge_translation=gauge,
        point_ids=np.asarray(ids, dtype=int),
    )
    return problem, reg


def _sync_back(rec: Reconstruction, problem: ba.BaProblem, reg: list):
    for k, v in enumerate(reg):
        rec.cameras[v] = problem.cameras[k]
        rec.poses[v] = problem.poses[k]
    for row, k in enumerate(problem.point_ids):
        rec.tracks[int(k)].point = problem.points[row].copy()


def _run_stage(rec: Reconstruction, pre: _Preprocessed, stage: ba.BaStage,
               only_view: str | None = None) -> None:
    problem, reg = _build_problem(rec, pre, only_view)
    t0 = time.perf_counter()
    solved, report = ba.solve(problem, stage, cauchy_scale=pre.config.cauchy_scale)
    _sync_back(rec, solved, reg)
    rec.stage_reports.append({
        "name": stage.name,
        "initial_cost": report.initial_cost,
        "final_cost": report.final_cost,
        "iterations": report.iterations,
        "converged": report.converged,
        "underdetermined": report.underdetermined,
        "excluded_observations": report.excluded_observations,
        "seconds": time.perf_counter() - t0,
        "trace": [[it, c, bool(a), lam] for it, c, a, lam in report.cost_trace],
    })


def _remove_outliers(rec: Reconstruction, pre: _Preprocessed) -> int:
    b_err = rec.thresholds.b_err
    if not math.isfinite(b_err):
        return 0
    try:
        problem, reg = _build_problem(rec, pre)
    except ba.NumericalFailure:
        return 0
    pruned, removed = ba.remove_outliers(problem, b_err)
    _sync_back_after_removal(rec, problem, pruned, reg)
    rec.counts["observations_removed"] = rec.counts.get("observations_removed", 0) + removed
    return removed


def _sync_back_after_removal(rec, before: ba.BaProblem, after: ba.BaProblem, reg: list):
    surviving: dict = {}
    for n in range(after.n_obs):
        tid = int(after.point_ids[after.obs_point[n]])
        surviving.setdefault(tid, set()).add(reg[after.obs_view[n]])
    reg_set = set(reg)
    live_after = {int(k) for k in after.point_ids}
    for row, k in enumerate(after.point_ids):
        rec.tracks[int(k)].point = after.points[row].copy()
    for k in before.point_ids:
        k = int(k)
        t = rec.tracks[k]
        if k not in live_after:
            t.point = None
            # drop the registered observations that failed the gate
            keep = surviving.get(k, set())
            for v in [v for v in t.obs if v in reg_set and v not in keep]:
                del t.obs[v]
            continue
        keep = surviving[k]
        for v in [v for v in t.obs if v in reg_set and v not in keep]:
            del t.obs[v]


# ---------------------------------------------------------------------------
# incremental pipeline
# ---------------------------------------------------------------------------


def _triangulate_pending(rec: Reconstruction, pre: _Preprocessed,
                         min_order: int, max_order: int) -> int:
    """Robust-triangulate tracks with >= 2 registered observations."""
    cfg = pre.config
    added = 0
    reg = set(rec.registered)
    for t in rec.tracks:
        if t.point is not None or not (min_order <= t.max_order <= max_order):
            continue
        obs = [(rec.cameras[v], rec.poses[v], t.obs[v]) for v in sorted(t.obs) if v in reg]
        if len(obs) < 2:
            continue
        try:
            point, mask = triangulate_robust(obs, replace(cfg.ransac_pose, seed=cfg.seed))
        except (TriangulationFailed, ValueError, GeometryError):
            continue
        t.point = point
        added += 1
    return added


def _two_view_initialize(rec: Reconstruction, pre: _Preprocessed, vi: str, vj: str):
    key = (vi, vj) if (vi, vj) in pre.pair_geoms else (vj, vi)
    g = pre.pair_geoms[key]
    rel = g.rel
    if key != (vi, vj):
        rel = rel.inverse()
        tn = np.linalg.norm(rel.t)
        rel = ViewPose(rel.q, rel.t / tn if tn > 0 else rel.t)
    rec.poses[vi] = ViewPose.identity()
    rec.poses[vj] = rel
    rec.order.extend([vi, vj])
    rec.anchor = vi

    cam_i, cam_j = rec.cameras[vi], rec.cameras[vj]
    n_points = 0
    for t in rec.tracks:
        if vi not in t.obs or vj not in t.obs:
            continue
        try:
            point = triangulate_dlt([(cam_i, rec.poses[vi], t.obs[vi]),
                                     (cam_j, rec.poses[vj], t.obs[vj])])
        except GeometryError:
            continue
        ok = True
        for cam, pose in ((cam_i, rec.poses[vi]), (cam_j, rec.poses[vj])):
            _, status = project_points(cam, pose, point[None, :])
            if status[0] != OK:
                ok = False
                break
        if ok:
            t.point = point
            n_points += 1
    if n_points < 10:
        raise InitFailed(f"initial pair ({vi}, {vj}) triangulated only {n_points} points")
    depths = np.array([t.point[2] for t in rec.tracks if t.point is not None])
    scale = float(np.median(depths))
    if scale <= 0:
        raise InitFailed("initial scene collapsed behind the first camera")
    for t in rec.tracks:
        if t.point is not None:
            t.point = t.point / scale
    rec.poses[vj] = ViewPose(rec.poses[vj].q, rec.poses[vj].t / scale)


def _register_view(rec: Reconstruction, pre: _Preprocessed, vid: str) -> None:
    cfg = pre.config
    pts3d, pix = [], []
    for t in rec.tracks:
        if t.point is not None and vid in t.obs:
            pts3d.append(t.point)
            pix.append(t.obs[vid])
    if len(pts3d) < 4:
        raise InsufficientInliers(f"only {len(pts3d)} visible points for {vid}")
    rcfg = replace(cfg.ransac_pose, seed=_pair_seed(cfg.seed, pre.view_index(vid), 0, 0xAB))
    pose, inliers = absolute_pose(np.asarray(pts3d), np.asarray(pix),
                                  rec.cameras[vid], rcfg)
    rec.poses[vid] = pose
    rec.order.append(vid)
    # pose + focal + distortion refinement of the new view against the map
    stage = ba.BaStage(f"register:{vid}", cfg.iters_register,
                       extrinsics=True, focal=True, distortion=True, points=False)
    try:
        _run_stage(rec, pre, stage, only_view=vid)
    except ba.NumericalFailure:
        pass


def run_incremental(manifest: ViewSetManifest, config: PipelineConfig) -> Reconstruction:
    """The staged incremental pipeline; returns a Reconstruction.

    Per-view registration failures do not abort the run: failed views are
    retried once at the end and reported in ``failures``.
    """
    pre = _Preprocessed(manifest, config)
    pre.estimate_pair_geometries()
    pre.calibrate_focals()
    pre.decompose_pairs()
    pre.sample_tracks(poses=None)

    rec = Reconstruction(view_ids=pre.view_ids, cameras=dict(pre.cameras), poses={},
                         tracks=pre.tracks, order=[], anchor=None,
                         thresholds=config.thresholds, counts=pre.counts)
    rec.counts.setdefault("observations_removed", 0)

    order, disconnected = select_view_order(pre.triple_scores(), pre.view_ids)
    for v in disconnected:
        rec.failures[v] = "disconnected: no scored three-cycle with the selected set"

    triple = order[:3] if len(order) >= 3 else order
    vi, vj = select_initial_pair(triple, pre, brute_force=config.brute_force)
    _two_view_initialize(rec, pre, vi, vj)

    queue = [v for v in order if v not in (vi, vj)]
    retried = set()
    while queue:
        vid = queue.pop(0)
        try:
            _register_view(rec, pre, vid)
        except (EstimationError, ValueError) as e:
            if vid not in retried:
                retried.add(vid)
                queue.append(vid)
            else:
                rec.failures[vid] = f"registration failed: {e}"
            continue
        rec.failures.pop(vid, None)
        _triangulate_pending(rec, pre, 3, 4)
        stage1 = ba.BaStage(f"ba:{vid}:a", config.iters_incremental_ba,
                            extrinsics=True, focal=True, distortion=True, points=True)
        _run_stage(rec, pre, stage1)
        _triangulate_pending(rec, pre, 2, 2)
        stage2 = ba.BaStage(f"ba:{vid}:b", config.iters_incremental_ba,
                            extrinsics=True, focal=True, distortion=True, points=True)
        _run_stage(rec, pre, stage2)
        _remove_outliers(rec, pre)

    final = ba.BaStage("final", config.iters_final_ba, extrinsics=True, focal=True,
                       distortion=True, principal_point=config.refine_principal_point,
                       points=True)
    _run_stage(rec, pre, final)

    if config.refine_camera_type:
        _escalate_fisheye(rec, pre)
    return rec


def _escalate_fisheye(rec: Reconstruction, pre: _Preprocessed) -> None:
    if pre.config.camera_kind is not CameraKind.FISHEYE_RADIAL:
        return
    for v in rec.registered:
        rec.cameras[v] = rec.cameras[v].to_fisheye_full()
    stage = ba.BaStage("escalate", pre.config.iters_escalation,
                       extrinsics=False, focal=False, distortion=True, points=True)
    try:
        _run_stage(rec, pre, stage)
    except ba.NumericalFailure:
        pass


# ---------------------------------------------------------------------------
# global pipeline
# ---------------------------------------------------------------------------


def run_global(manifest: ViewSetManifest, config: PipelineConfig,
               init_poses: dict | None = None) -> Reconstruction:
    """Pose-initialized global pipeline.

    ``init_poses`` defaults to the manifest's ``init_poses`` file. The view
    with the highest summed track score over cycles of order >= 3 is the
    anchor; its pose never changes.
    """
    if init_poses is None:
        if manifest.init_poses is None:
            raise MissingInit("global mode needs init poses (manifest or argument)")
        init_poses = read_pose_file(manifest.init_poses)
    missing = [v for v in manifest.view_ids if v not in init_poses]
    if missing:
        raise MissingInit(f"init poses missing for views {missing}")

    pre = _Preprocessed(manifest, config)
    pre.estimate_pair_geometries()
    pre.calibrate_focals()
    pre.sample_tracks(poses=init_poses)

    rec = Reconstruction(view_ids=pre.view_ids, cameras=dict(pre.cameras),
                         poses={v: init_poses[v] for v in pre.view_ids},
                         tracks=pre.tracks, order=list(pre.view_ids), anchor=None,
                         thresholds=config.thresholds, counts=pre.counts)
    rec.counts.setdefault("observations_removed", 0)

    anchor_scores = {v: 0.0 for v in pre.view_ids}
    for t in rec.tracks:
        if t.max_order >= 3:
            for v in t.obs:
                if v in anchor_scores:
                    anchor_scores[v] += t.score
    if all(s == 0.0 for s in anchor_scores.values()):
        rec.anchor = pre.view_ids[0]
        rec.failures["<anchor>"] = "anchor undetermined: no cycles of order >= 3; using first view"
    else:
        rec.anchor = max(sorted(anchor_scores), key=lambda v: anchor_scores[v])
    # the anchor must be first: _build_problem fixes the first registered view
    rec.order = [rec.anchor] + [v for v in pre.view_ids if v != rec.anchor]

    _triangulate_pending(rec, pre, 2, 4)

    stages = [
        ba.BaStage("global:extrinsics", config.iters_global_extrinsics, extrinsics=True,
                   points=True),
        ba.BaStage("global:focal", config.iters_global_focal, extrinsics=True, focal=True,
                   points=True),
        ba.BaStage("global:distortion", config.iters_global_distortion, extrinsics=True,
                   focal=True, distortion=True, points=True),
        ba.BaStage("global:final", config.iters_final_ba, extrinsics=True, focal=True,
                   distortion=True, principal_point=config.refine_principal_point,
                   points=True),
    ]
    for stage in stages:
        _run_stage(rec, pre, stage)

    if config.refine_camera_type:
        _escalate_fisheye(rec, pre)
    return rec


def run(manifest_path, config: PipelineConfig, init_poses: dict | None = None) -> Reconstruction:
    manifest = read_manifest(manifest_path)
    if config.mode == "incremental":
        return run_incremental(manifest, config)
    return run_global(manifest, config, init_poses)


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------


def write_cameras_file(path, rec: Reconstruction) -> None:
    lines = []
    for v in rec.view_ids:
        if v not in rec.poses:
            continue
        c = rec.cameras[v]
        ks = " ".join(format(x, ".17g") for x in c.k)
        lines.append(f"{v} {c.kind.value} {c.f:.17g} {c.cx:.17g} {c.cy:.17g} {ks}")
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")


def write_poses_file(path, rec: Reconstruction) -> None:
    write_pose_file(path, {v: rec.poses[v] for v in rec.view_ids if v in rec.poses})


def write_ply(path, rec: Reconstruction, manifest: ViewSetManifest | None = None) -> None:
    """Binary little-endian PLY of the triangulated points.

    Colors are sampled from view images when the manifest provides image
    paths (first registered view observing each point); white otherwise.
    """
    pts = [(k, t) for k, t in enumerate(rec.tracks) if t.point is not None]
    images = {}
    if manifest is not None:
        for spec in manifest.views:
            if spec.image:
                images[spec.id] = spec.image
    samplers = {}
    if images:
        try:
            from PIL import Image

            for v, p in images.items():
                if Path(p).exists():
                    samplers[v] = np.asarray(Image.open(p).convert("RGB"))
        except ImportError:
            samplers = {}

    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rec_struct = struct.Struct("<fffBBB")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for _, t in pts:
            rgb = (255, 255, 255)
            for v in rec.view_ids:
                if v in t.obs and v in samplers:
                    img = samplers[v]
                    x = min(max(int(math.floor(t.obs[v][0] + 0.5)), 0), img.shape[1] - 1)
                    y = min(max(int(math.floor(t.obs[v][1] + 0.5)), 0), img.shape[0] - 1)
                    rgb = tuple(int(c) for c in img[y, x])
                    break
            fh.write(rec_struct.pack(float(t.point[0]), float(t.point[1]), float(t.point[2]),
                                     *rgb))
