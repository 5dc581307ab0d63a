"""Pose-accuracy metrics and the synthetic scene generator.

The generator builds a ring of cameras around an analytic bumpy surface and
emits exact dense warps between every ordered view pair, which makes it the
ground-truth oracle for the whole pipeline: every intermediate quantity
(cycles, fundamental matrices, focal lengths, poses) has a known value.

Metrics follow the pairwise convention: relative rotation and translation
angular errors (degrees) per view pair, combined into AUC over a threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    OK,
    CameraKind,
    CameraModel,
    ViewPose,
    project_points,
    rotation_angle,
    quat_exp,
    quat_multiply,
    unproject_points,
)
from .warpio import (
    INVALID_CONFIDENCE,
    ViewSpec,
    WarpField,
    WarpSpec,
    write_manifest,
    write_pose_file,
    write_warp,
)


class ConfigError(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class ZeroBaseline(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairError:
    i: str
    j: str
    rra: float  # degrees
    rta: float  # degrees


def _relative(pose_i: ViewPose, pose_j: ViewPose):
    """Relative rotation and translation of j with respect to i."""
    R_rel = pose_j.R @ pose_i.R.T
    t_rel = pose_j.t - R_rel @ pose_i.t
    return R_rel, t_rel


def _vec_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    cross = np.linalg.norm(np.cross(a, b))
    dot = float(a @ b)
    return math.degrees(math.atan2(cross, dot))


def pair_errors(est: dict, gt: dict) -> tuple:
    """Per-pair angular errors between two pose sets with equal view ids.

    Gauge-invariant: a global rigid transform plus uniform scaling of either
    set changes nothing. Pairs whose ground-truth baseline is below 1e-12 are
    skipped and reported in the second return value.
    """
    if set(est) != set(gt):
        raise ValueError("estimated and ground-truth view ids differ")
    views = sorted(est)
    errors = []
    skipped = []
    for a in range(len(views)):
        for b in range(a + 1, len(views)):
            vi, vj = views[a], views[b]
            R_e, t_e = _relative(est[vi], est[vj])
            R_g, t_g = _relative(gt[vi], gt[vj])
            norm_g = np.linalg.norm(t_g)
            if norm_g < 1e-12:
                skipped.append((vi, vj))
                continue
            rra = math.degrees(rotation_angle(R_e @ R_g.T))
            if np.linalg.norm(t_e) < 1e-12:
                rta = 180.0  # estimated baseline collapsed; direction undefined
            else:
                rta = _vec_angle_deg(t_e, t_g)
            errors.append(PairError(vi, vj, rra, rta))
    return errors, skipped


def auc(errors: list, tau: float) -> float:
    """Area under the accuracy curve up to ``tau`` degrees, in [0, 100].

    Per pair the error scalar is max(rra, rta); the accuracy curve
    acc(t) = fraction of pairs with error < t is integrated exactly
    (piecewise constant), normalized so a perfect set scores 100.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not errors:
        raise EmptyInput("no pair errors")
    e = np.array([max(pe.rra, pe.rta) for pe in errors], dtype=float)
    return float(100.0 * np.sum(np.maximum(0.0, tau - e)) / (len(e) * tau))


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_views: int = 8
    image_size: tuple = (96, 96)     # pixels (width, height)
    warp_size: tuple = (96, 96)      # warp grid resolution
    camera_kind: CameraKind = CameraKind.PINHOLE_RADIAL
    focal: float = 110.0             # true focal, pixels
    distortion: tuple = (0.0, 0.0)
    ring_radius: float = 2.0
    ring_jitter: float = 0.1         # positional jitter, scene units
    look_jitter: float = 0.5         # per-view look-at target jitter; keeps the
                                     # principal axes from meeting in one point,
                                     # which degenerates focal self-calibration
    base_depth: float = 6.0          # distance from ring plane to the surface
    bump_amplitude: float = 0.5
    bump_freq: float = 1.1           # radians per scene unit
    pixel_noise: float = 0.0         # sigma of Gaussian target noise, pixels
    outlier_fraction: float = 0.0
    invalid_fraction: float = 0.0
    init_rot_noise_deg: float = 0.0  # emitted init_poses perturbation
    init_trans_noise: float = 0.0    # fraction of median baseline
    seed: int = 0

    def __post_init__(self):
        if self.n_views < 2:
            raise ConfigError("need at least two views")
        if self.ring_radius <= 0 and self.n_views > 1:
            raise ConfigError("ring radius must be positive for multiple views")
        if self.pixel_noise < 0:
            raise ConfigError("pixel noise must be >= 0")
        for frac in (self.outlier_fraction, self.invalid_fraction):
            if not (0.0 <= frac < 1.0):
                raise ConfigError("fractions must be in [0, 1)")
        if self.base_depth <= self.bump_amplitude:
            raise ConfigError("surface would intersect the camera ring")


@dataclass
class SynthScene:
    cameras: dict
    poses: dict
    warps: dict                  # (src, dst) -> WarpField
    init_poses: dict | None
    view_ids: list


def _look_at(center: np.ndarray, target: np.ndarray, up: np.ndarray) -> ViewPose:
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        up = np.array([0.0, 1.0, 0.001])
        x = np.cross(up, z)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return ViewPose.from_matrix(R, -R @ center)


class _Surface:
    """Height field z(x, y) = depth + A sin(w x + p1) sin(w y + p2)."""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.depth = cfg.base_depth
        self.amp = cfg.bump_amplitude
        self.freq = cfg.bump_freq
        self.phase = rng.uniform(0.0, 2.0 * math.pi, size=2)

    def z(self, x, y):
        return self.depth + self.amp * np.sin(self.freq * x + self.phase[0]) * np.sin(
            self.freq * y + self.phase[1])

    def dz(self, x, y):
        sx = np.sin(self.freq * x + self.phase[0])
        cx = np.cos(self.freq * x + self.phase[0])
        sy = np.sin(self.freq * y + self.phase[1])
        cy = np.cos(self.freq * y + self.phase[1])
        return self.amp * self.freq * cx * sy, self.amp * self.freq * sx * cy

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """First intersection of rays with the height field (Newton).

        Returns (points (N,3), hit mask). Rays must head toward +z.
        """
        oz = origins[:, 2]
        dz = dirs[:, 2]
        ok = dz > 1e-6
        lam = np.where(ok, (self.depth - oz) / np.where(ok, dz, 1.0), 0.0)
        g = np.zeros_like(lam)
        for _ in range(60):
            p = origins + lam[:, None] * dirs
            g = p[:, 2] - self.z(p[:, 0], p[:, 1])
            gx, gy = self.dz(p[:, 0], p[:, 1])
            gp = dirs[:, 2] - (gx * dirs[:, 0] + gy * dirs[:, 1])
            bad = np.abs(gp) < 1e-9
            gp = np.where(bad, 1.0, gp)
            step = np.where(ok & ~bad, g / gp, 0.0)
            lam = lam - step
            if np.max(np.abs(step), initial=0.0) < 1e-12:
                break
        p = origins + lam[:, None] * dirs
        g = p[:, 2] - self.z(p[:, 0], p[:, 1])
        ok &= (np.abs(g) < 1e-9) & (lam > 0)
        return p, ok


def build_scene(cfg: SynthConfig) -> SynthScene:
    """Generate cameras, poses and exact consistent warps in memory."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x5EED)))
    surface = _Surface(cfg, rng)
    w_img, h_img = cfg.image_size
    w_warp, h_warp = cfg.warp_size
    sx, sy = w_img / w_warp, h_img / h_warp
    view_ids = [f"v{k}" for k in range(cfg.n_views)]

    cameras = {}
    poses = {}
    for k, vid in enumerate(view_ids):
        phi = 2.0 * math.pi * k / cfg.n_views
        center = np.array([cfg.ring_radius * math.cos(phi),
                           cfg.ring_radius * math.sin(phi),
                           0.0]) + rng.normal(0.0, cfg.ring_jitter, size=3)
        target = np.array([0.0, 0.0, cfg.base_depth]) + rng.normal(0.0, cfg.look_jitter, size=3)
        up = np.array([0.0, 1.0, 0.0]) + rng.normal(0.0, 0.05, size=3)
        poses[vid] = _look_at(center, target, up)
        cameras[vid] = CameraModel(cfg.camera_kind, cfg.focal,
                                   (w_img - 1) / 2.0, (h_img - 1) / 2.0,
                                   cfg.distortion, w_img, h_img)

    # exact geometric warps
    ys, xs = np.mgrid[0:h_warp, 0:w_warp]
    grid_warp = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    grid_img = np.empty_like(grid_warp)
    grid_img[:, 0] = (grid_warp[:, 0] + 0.5) * sx - 0.5
    grid_img[:, 1] = (grid_warp[:, 1] + 0.5) * sy - 0.5

    hits = {}
    for vid in view_ids:
        cam, pose = cameras[vid], poses[vid]
        bearings, conv = unproject_points(cam, grid_img)
        center = pose.center()
        dirs = bearings @ pose.R  # camera frame -> world
        origins = np.broadcast_to(center, dirs.shape)
        pts, ok = surface.intersect(origins, np.where(conv[:, None], dirs, 0.0))
        hits[vid] = (pts, ok & conv)

    warps = {}
    for src in view_ids:
        pts, ok_src = hits[src]
        for dst in view_ids:
            if dst == src:
                continue
            cam_d, pose_d = cameras[dst], poses[dst]
            pix_img, status = project_points(cam_d, pose_d, pts)
            ok = ok_src & (status == OK)
            # occlusion: the surface point the destination actually sees along
            # this ray must coincide with the source's point
            center_d = pose_d.center()
            rays = pts - center_d
            dist = np.linalg.norm(rays, axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                rays_unit = rays / np.where(dist > 0, dist, 1.0)[:, None]
            seen, ok_hit = surface.intersect(np.broadcast_to(center_d, rays.shape), rays_unit)
            ok &= ok_hit & (np.linalg.norm(seen - pts, axis=1) < 1e-6 * cfg.base_depth)
            # to warp-grid coordinates of the destination
            tx = (pix_img[:, 0] + 0.5) / sx - 0.5
            ty = (pix_img[:, 1] + 0.5) / sy - 0.5
            ok &= np.where(np.isfinite(tx) & np.isfinite(ty),
                           (tx >= -0.5) & (tx <= w_warp - 0.5) & (ty >= -0.5) & (ty <= h_warp - 0.5),
                           False)
            target_arr = np.zeros((h_warp, w_warp, 2))
            target_arr[:, :, 0] = np.where(ok, np.nan_to_num(tx), 0.0).reshape(h_warp, w_warp)
            target_arr[:, :, 1] = np.where(ok, np.nan_to_num(ty), 0.0).reshape(h_warp, w_warp)
            conf = np.where(ok, 1.0, INVALID_CONFIDENCE).reshape(h_warp, w_warp)
            warps[(src, dst)] = WarpField(src, dst, w_warp, h_warp, w_warp, h_warp,
                                          target_arr, conf)

    _enforce_round_trip_closure(warps, view_ids)

    # degrade: masked pixels, noise, planted outliers (after the closure mask,
    # so the noiseless construction stays exactly cycle-consistent)
    for (src, dst), f in warps.items():
        stream = np.random.default_rng(np.random.SeedSequence(
            (cfg.seed, view_ids.index(src), view_ids.index(dst), 0xDE6)))
        valid = f.confidence > 0
        if cfg.invalid_fraction > 0:
            drop = stream.random((h_warp, w_warp)) < cfg.invalid_fraction
            valid &= ~drop
        if cfg.pixel_noise > 0:
            f.target[valid] += stream.normal(0.0, cfg.pixel_noise, size=(int(valid.sum()), 2))
        if cfg.outlier_fraction > 0:
            out = valid & (stream.random((h_warp, w_warp)) < cfg.outlier_fraction)
            n_out = int(out.sum())
            f.target[out, 0] = stream.uniform(-0.5, w_warp - 0.5, size=n_out)
            f.target[out, 1] = stream.uniform(-0.5, h_warp - 0.5, size=n_out)
        # noise may push targets out of the destination grid
        in_b = ((f.target[:, :, 0] >= -0.5) & (f.target[:, :, 0] <= w_warp - 0.5)
                & (f.target[:, :, 1] >= -0.5) & (f.target[:, :, 1] <= h_warp - 0.5))
        valid &= in_b
        f.confidence[:] = np.where(valid, 1.0, INVALID_CONFIDENCE)
        f.target[~valid] = 0.0

    init_poses = None
    if cfg.init_rot_noise_deg > 0 or cfg.init_trans_noise > 0:
        centers = np.stack([poses[v].center() for v in view_ids])
        base = np.median(np.linalg.norm(centers - centers.mean(axis=0), axis=1))
        stream = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x171)))
        init_poses = {}
        for vid in view_ids:
            axis = stream.normal(size=3)
            axis /= np.linalg.norm(axis)
            ang = math.radians(cfg.init_rot_noise_deg) * stream.uniform(0.5, 1.0)
            dq = quat_exp(axis * ang)
            dt = stream.normal(size=3) * cfg.init_trans_noise * base
            p = poses[vid]
            init_poses[vid] = ViewPose(quat_multiply(dq, p.q), p.t + dt)

    return SynthScene(cameras=cameras, poses=poses, warps=warps,
                      init_poses=init_poses, view_ids=view_ids)


def _enforce_round_trip_closure(warps: dict, view_ids: list) -> None:
    """Mask pixels whose forward-backward chain does not return exactly.

    Rounding between grids can leave a pixel whose round trip lands on a
    neighbor; those are masked as inconsistent (like occlusions) so that the
    noiseless construction closes every surviving 2-cycle. Masking one warp
    can break chains through it, so iterate to a fixed point.
    """
    for _ in range(12):
        changed = False
        for (src, dst), f in warps.items():
            back = warps.get((dst, src))
            if back is None:
                continue
            valid = f.confidence > 0
            if not valid.any():
                continue
            ys, xs = np.nonzero(valid)
            t = f.target[ys, xs]
            rx = np.floor(t[:, 0] + 0.5).astype(int)
            ry = np.floor(t[:, 1] + 0.5).astype(int)
            ok = (rx >= 0) & (rx < back.width) & (ry >= 0) & (ry < back.height)
            rxc = np.clip(rx, 0, back.width - 1)
            ryc = np.clip(ry, 0, back.height - 1)
            ok &= back.confidence[ryc, rxc] > 0
            tb = back.target[ryc, rxc]
            bx = np.floor(tb[:, 0] + 0.5).astype(int)
            by = np.floor(tb[:, 1] + 0.5).astype(int)
            ok &= (bx == xs) & (by == ys)
            if not ok.all():
                f.confidence[ys[~ok], xs[~ok]] = INVALID_CONFIDENCE
                f.target[ys[~ok], xs[~ok]] = 0.0
                changed = True
        if not changed:
            return


def generate_scene(cfg: SynthConfig, out_dir) -> Path:
    """Build a scene and write warps, manifest and ground-truth files.

    Returns the manifest path. Output is bit-deterministic per seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = build_scene(cfg)
    w_img, h_img = cfg.image_size

    warp_specs = []
    for (src, dst), f in sorted(scene.warps.items()):
        name = f"warp_{src}_{dst}.rwf"
        write_warp(out / name, f)
        warp_specs.append(WarpSpec(src=src, dst=dst, path=name))

    write_pose_file(out / "gt_poses.txt", {v: scene.poses[v] for v in scene.view_ids})
    cam_lines = []
    for vid in scene.view_ids:
        c = scene.cameras[vid]
        ks = " ".join(format(v, ".17g") for v in c.k)
        cam_lines.append(f"{vid} {c.kind.value} {c.f:.17g} {c.cx:.17g} {c.cy:.17g} {ks}")
    (out / "gt_cameras.txt").write_text("\n".join(cam_lines) + "\n", "utf-8")

    init_path = None
    if scene.init_poses is not None:
        init_path = "init_poses.txt"
        write_pose_file(out / init_path, {v: scene.init_poses[v] for v in scene.view_ids})

    views = [ViewSpec(id=v, width=w_img, height=h_img) for v in scene.view_ids]
    manifest_path = out / "manifest.json"
    write_manifest(manifest_path, views, warp_specs,
                   init_poses=init_path, gt_poses="gt_poses.txt")
    return manifest_path
