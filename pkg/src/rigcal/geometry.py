"""Camera models, rigid poses, projection and two-view epipolar algebra.

Conventions used throughout the package:

* Poses are world-to-camera: ``x_cam = R @ x_world + t``.
* Quaternions are stored as ``[w, x, y, z]`` and kept unit-norm.
* Pixel coordinates follow the computer-vision convention where integer
  coordinates are pixel centers, so an image of width W spans
  ``[-0.5, W - 0.5]``.
* A single focal length is shared by both axes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Fisheye rays more than this far off the optical axis are treated as
# behind the camera: the equidistant model is defined past 90 deg but the
# pole region is numerically useless.
FISHEYE_THETA_MAX = math.radians(95.0)

_NEWTON_TOL = 1e-12
_NEWTON_MAX_ITER = 25

OK = 0
BEHIND = 1
OUT_OF_DOMAIN = 2


class GeometryError(ValueError):
    """Base class for geometric failure modes."""


class BehindCamera(GeometryError):
    """Point projects behind the camera (or beyond the fisheye cap)."""


class OutOfDomain(GeometryError):
    """Distortion polynomial is non-monotonic at the requested radius."""


class NoConverge(GeometryError):
    """Iterative distortion inversion failed to reach tolerance."""


class DegenerateGeometry(GeometryError):
    """Input configuration does not determine a unique answer."""


class AmbiguousDecomposition(GeometryError):
    """Essential-matrix decomposition has no clear cheirality winner."""


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = math.sqrt(float(q @ q))
    if n == 0.0:
        raise ValueError("zero quaternion")
    out = q / n
    # canonical sign keeps serialized poses reproducible
    if out[0] < 0.0:
        out = -out
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method: numerically stable for all rotation matrices."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_exp(delta: np.ndarray) -> np.ndarray:
    """Map a 3-vector rotation increment (axis * angle) to a unit quaternion."""
    delta = np.asarray(delta, dtype=float)
    angle = math.sqrt(float(delta @ delta))
    if angle < 1e-12:
        # first-order expansion; renormalized by the caller
        return quat_normalize(np.array([1.0, 0.5 * delta[0], 0.5 * delta[1], 0.5 * delta[2]]))
    axis = delta / angle
    half = 0.5 * angle
    s = math.sin(half)
    return np.array([math.cos(half), s * axis[0], s * axis[1], s * axis[2]])


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix in radians, in [0, pi]."""
    c = 0.5 * (float(np.trace(R)) - 1.0)
    return math.acos(min(1.0, max(-1.0, c)))


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewPose:
    """World-to-camera rigid transform: ``x_cam = R(q) @ x_world + t``."""

    q: np.ndarray  # unit quaternion [w, x, y, z]
    t: np.ndarray  # translation, camera frame

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.q, dtype=float))
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("non-finite translation")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "ViewPose":
        return ViewPose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(R: np.ndarray, t: np.ndarray) -> "ViewPose":
        return ViewPose(matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def compose(self, other: "ViewPose") -> "ViewPose":
        """self after other: (self * other)(x) = self(other(x))."""
        q = quat_multiply(self.q, other.q)
        t = self.R @ other.t + self.t
        return ViewPose(q, t)

    def inverse(self) -> "ViewPose":
        qi = quat_conjugate(self.q)
        Ri = quat_to_matrix(qi)
        return ViewPose(qi, -(Ri @ self.t))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to world points of shape (..., 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.R.T + self.t

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -(self.R.T @ self.t)

    def relative_to(self, other: "ViewPose") -> "ViewPose":
        """Pose of self's camera expressed in other's camera frame: self * other^-1."""
        return self.compose(other.inverse())


# ---------------------------------------------------------------------------
# camera models
# ---------------------------------------------------------------------------


class CameraKind(enum.Enum):
    PINHOLE_RADIAL = "pinhole_radial"  # k1, k2 on r^2 of the normalized plane
    FISHEYE_RADIAL = "fisheye_radial"  # equidistant, k1, k2 on theta^2
    FISHEYE_FULL = "fisheye_full"      # equidistant, k1..k4 on theta^2

    @property
    def n_dist(self) -> int:
        return 4 if self is CameraKind.FISHEYE_FULL else 2

    @property
    def is_fisheye(self) -> bool:
        return self is not CameraKind.PINHOLE_RADIAL


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics with a single focal length for both axes."""

    kind: CameraKind
    f: float
    cx: float
    cy: float
    k: tuple
    width: int
    height: int

    def __post_init__(self):
        if not (self.f > 0 and math.isfinite(self.f)):
            raise ValueError(f"focal must be positive, got {self.f}")
        if not (-0.5 <= self.cx <= self.width - 0.5 and -0.5 <= self.cy <= self.height - 0.5):
            raise ValueError("principal point outside image bounds")
        k = tuple(float(v) for v in self.k)
        if len(k) != self.kind.n_dist:
            raise ValueError(f"{self.kind.value} expects {self.kind.n_dist} distortion coefficients")
        if not all(math.isfinite(v) for v in k):
            raise ValueError("non-finite distortion coefficient")
        object.__setattr__(self, "f", float(self.f))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "k", k)

    @property
    def K(self) -> np.ndarray:
        """Pinhole calibration matrix (ignores distortion)."""
        return np.array([[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]])

    def with_params(self, **kwargs) -> "CameraModel":
        d = dict(kind=self.kind, f=self.f, cx=self.cx, cy=self.cy, k=self.k,
                 width=self.width, height=self.height)
        d.update(kwargs)
        return CameraModel(**d)

    def to_fisheye_full(self) -> "CameraModel":
        """Escalate a fisheye-radial model; new coefficients start at zero."""
        if self.kind is not CameraKind.FISHEYE_RADIAL:
            raise ValueError("only fisheye_radial escalates to fisheye_full")
        return self.with_params(kind=CameraKind.FISHEYE_FULL, k=self.k + (0.0, 0.0))


def calibration_matrix(f: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])


def _theta_poly(k: tuple, theta: np.ndarray) -> np.ndarray:
    """theta * (1 + k1 t^2 + k2 t^4 [+ k3 t^6 + k4 t^8])."""
    t2 = theta * theta
    acc = np.zeros_like(theta)
    for c in reversed(k):
        acc = (acc + c) * t2
    return theta * (1.0 + acc)


def _theta_poly_deriv(k: tuple, theta: np.ndarray) -> np.ndarray:
    t2 = theta * theta
    acc = np.zeros_like(theta)
    for i, c in reversed(list(enumerate(k))):
        acc = acc * t2 + (2 * i + 3) * c
    return 1.0 + acc * t2


def _radial_factor(k: tuple, r2: np.ndarray) -> np.ndarray:
    """1 + k1 r^2 + k2 r^4 for the pinhole model."""
    return 1.0 + r2 * (k[0] + r2 * k[1])


def project_points(camera: CameraModel, pose: ViewPose, points: np.ndarray):
    """Project world points of shape (N, 3).

    Returns ``(pixels, status)`` where status is OK, BEHIND or OUT_OF_DOMAIN
    per point; pixels are NaN where status != OK.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    xc = pose.transform(pts)
    n = xc.shape[0]
    pix = np.full((n, 2), np.nan)
    status = np.zeros(n, dtype=np.int8)

    if camera.kind is CameraKind.PINHOLE_RADIAL:
        z = xc[:, 2]
        behind = z <= 0
        status[behind] = BEHIND
        ok = ~behind
        if np.any(ok):
            xn = xc[ok, :2] / z[ok, None]
            r2 = np.sum(xn * xn, axis=1)
            # monotonicity of r -> r * (1 + k1 r^2 + k2 r^4)
            mono = 1.0 + r2 * (3.0 * camera.k[0] + 5.0 * camera.k[1] * r2)
            bad = mono <= 0
            d = _radial_factor(camera.k, r2)
            sub = camera.f * d[:, None] * xn + np.array([camera.cx, camera.cy])
            idx = np.flatnonzero(ok)
            pix[idx[~bad]] = sub[~bad]
            status[idx[bad]] = OUT_OF_DOMAIN
    else:
        r = np.sqrt(xc[:, 0] ** 2 + xc[:, 1] ** 2)
        theta = np.arctan2(r, xc[:, 2])
        behind = theta >= FISHEYE_THETA_MAX
        status[behind] = BEHIND
        ok = ~behind
        if np.any(ok):
            th = theta[ok]
            mono = _theta_poly_deriv(camera.k, th)
            bad = mono <= 0
            theta_d = _theta_poly(camera.k, th)
            rr = r[ok]
            scale = np.where(rr > 0, theta_d / np.where(rr > 0, rr, 1.0), 0.0)
            sub = camera.f * scale[:, None] * xc[ok, :2] + np.array([camera.cx, camera.cy])
            # r == 0 maps to the principal point
            sub[rr == 0] = [camera.cx, camera.cy]
            idx = np.flatnonzero(ok)
            pix[idx[~bad]] = sub[~bad]
            status[idx[bad]] = OUT_OF_DOMAIN
    return pix, status


def project(camera: CameraModel, pose: ViewPose, point: np.ndarray) -> np.ndarray:
    """Single-point projection; raises BehindCamera / OutOfDomain."""
    point = np.asarray(point, dtype=float)
    if not np.all(np.isfinite(point)):
        raise ValueError("non-finite point")
    pix, status = project_points(camera, pose, point[None, :])
    if status[0] == BEHIND:
        raise BehindCamera("point behind camera")
    if status[0] == OUT_OF_DOMAIN:
        raise OutOfDomain("distortion polynomial non-monotonic at this radius")
    return pix[0]


def _invert_radial_newton(dist_fun, deriv_fun, target: np.ndarray):
    """Damped Newton for monotone scalar distortion maps, vectorized.

    Returns (solution, converged mask). Damping halves the step whenever the
    residual magnitude would grow.
    """
    x = target.copy()
    ok = np.ones(x.shape, dtype=bool)
    res = dist_fun(x) - target
    for _ in range(_NEWTON_MAX_ITER):
        active = ok & (np.abs(res) >= _NEWTON_TOL)
        if not np.any(active):
            break
        d = deriv_fun(x)
        flat = np.abs(d) < 1e-14
        ok &= ~(flat & active)
        active &= ~flat
        step = np.where(active, res / np.where(flat, 1.0, d), 0.0)
        x_new = x - step
        res_new = dist_fun(x_new) - target
        # damping 1/2 on overshoot
        for _ in range(30):
            worse = active & (np.abs(res_new) > np.abs(res))
            if not np.any(worse):
                break
            step = np.where(worse, 0.5 * step, step)
            x_new = np.where(worse, x - step, x_new)
            res_new = dist_fun(x_new) - target
        x = np.where(active, x_new, x)
        res = np.where(active, res_new, res)
    ok &= np.abs(res) < _NEWTON_TOL
    return x, ok


def unproject_points(camera: CameraModel, pixels: np.ndarray):
    """Unproject pixels of shape (N, 2) to unit bearings in the camera frame.

    Returns ``(bearings, converged)``; rows where Newton inversion failed are
    flagged False and left NaN.
    """
    pix = np.atleast_2d(np.asarray(pixels, dtype=float))
    delta = (pix - np.array([camera.cx, camera.cy])) / camera.f
    rd = np.sqrt(np.sum(delta * delta, axis=1))
    n = pix.shape[0]
    bearings = np.full((n, 3), np.nan)

    if camera.kind is CameraKind.PINHOLE_RADIAL:
        k = camera.k
        r, ok = _invert_radial_newton(
            lambda r: r * _radial_factor(k, r * r),
            lambda r: 1.0 + r * r * (3.0 * k[0] + 5.0 * k[1] * r * r),
            rd,
        )
        ok &= r >= 0.0  # a negative-radius root is outside the model's domain
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(rd > 0, r / np.where(rd > 0, rd, 1.0), 1.0)
        xn = delta * scale[:, None]
        v = np.concatenate([xn, np.ones((n, 1))], axis=1)
        bearings[ok] = v[ok] / np.linalg.norm(v[ok], axis=1, keepdims=True)
    else:
        k = camera.k
        theta, ok = _invert_radial_newton(
            lambda t: _theta_poly(k, t),
            lambda t: _theta_poly_deriv(k, t),
            rd,
        )
        ok &= (theta >= 0.0) & (theta < FISHEYE_THETA_MAX)
        with np.errstate(invalid="ignore", divide="ignore"):
            u = delta / np.where(rd > 0, rd, 1.0)[:, None]
        s = np.sin(theta)
        c = np.cos(theta)
        v = np.stack([s * u[:, 0], s * u[:, 1], c], axis=1)
        v[rd == 0] = [0.0, 0.0, 1.0]
        bearings[ok] = v[ok]
    return bearings, ok


def unproject(camera: CameraModel, pixel: np.ndarray) -> np.ndarray:
    """Single-pixel unprojection to a unit bearing; raises NoConverge."""
    pixel = np.asarray(pixel, dtype=float)
    if not np.all(np.isfinite(pixel)):
        raise ValueError("non-finite pixel")
    b, ok = unproject_points(camera, pixel[None, :])
    if not ok[0]:
        raise NoConverge("distortion inversion did not converge")
    return b[0]


# ---------------------------------------------------------------------------
# triangulation
# ---------------------------------------------------------------------------

Observation = tuple  # (CameraModel, ViewPose, pixel 2-vector)


def triangulate_dlt(observations: Sequence[Observation]) -> np.ndarray:
    """Triangulate one point from >= 2 (camera, pose, pixel) observations.

    Homogeneous DLT on unprojected bearings followed by one Gauss-Newton
    reprojection refinement step. Raises DegenerateGeometry when the design
    matrix does not determine a unique finite point (e.g. parallel bearings).
    """
    if len(observations) < 2:
        raise ValueError("need at least two observations")
    rows = []
    for camera, pose, pixel in observations:
        b = unproject(camera, np.asarray(pixel, dtype=float))
        Rt = np.concatenate([pose.R, pose.t[:, None]], axis=1)
        rows.append(skew(b) @ Rt)
    A = np.concatenate(rows, axis=0)
    _, s, vt = np.linalg.svd(A)
    if s[-2] < 1e-8 * s[0]:
        raise DegenerateGeometry("triangulation design matrix rank-deficient")
    xh = vt[-1]
    if abs(xh[3]) < 1e-12 * np.linalg.norm(xh[:3]):
        raise DegenerateGeometry("triangulated point at infinity")
    x = xh[:3] / xh[3]

    # one Gauss-Newton step on the pixel reprojection residual
    res = []
    jac = []
    for camera, pose, pixel in observations:
        pix, status = project_points(camera, pose, x[None, :])
        if status[0] != OK:
            continue
        J = _projection_point_jacobian(camera, pose, x)
        res.append(pix[0] - np.asarray(pixel, dtype=float))
        jac.append(J)
    if res:
        r = np.concatenate(res)
        J = np.concatenate(jac, axis=0)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        if np.all(np.isfinite(step)):
            x = x + step
    return x


def project_with_jacobians(camera: CameraModel, pose: ViewPose, points: np.ndarray):
    """Project (N, 3) world points and return analytic partial derivatives.

    Returns ``(pixels, status, J_xc, J_intr)`` where

    * ``J_xc[n]`` is d(pixel)/d(camera-frame point), 2x3,
    * ``J_intr[n]`` is d(pixel)/d(intrinsics), 2x(1+D+2) with columns ordered
      ``[f, k1..kD, cx, cy]``.

    Rows with status != OK carry NaN derivatives.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    pix, status = project_points(camera, pose, pts)
    n = pts.shape[0]
    nd = camera.kind.n_dist
    J_xc = np.full((n, 2, 3), np.nan)
    J_intr = np.full((n, 2, 3 + nd), np.nan)
    ok = status == OK
    if not np.any(ok):
        return pix, status, J_xc, J_intr
    xc = pose.transform(pts)[ok]
    f = camera.f
    k = camera.k

    if camera.kind is CameraKind.PINHOLE_RADIAL:
        z = xc[:, 2]
        xn = xc[:, :2] / z[:, None]
        r2 = np.sum(xn * xn, axis=1)
        d = _radial_factor(k, r2)
        dd_dr2 = k[0] + 2.0 * k[1] * r2
        # d pix / d xn = f * (d * I + 2 dd_dr2 * xn xn^T)
        outer = xn[:, :, None] * xn[:, None, :]
        dpix_dxn = f * (d[:, None, None] * np.eye(2) + 2.0 * dd_dr2[:, None, None] * outer)
        dxn_dxc = np.zeros((xc.shape[0], 2, 3))
        dxn_dxc[:, 0, 0] = 1.0 / z
        dxn_dxc[:, 1, 1] = 1.0 / z
        dxn_dxc[:, 0, 2] = -xc[:, 0] / (z * z)
        dxn_dxc[:, 1, 2] = -xc[:, 1] / (z * z)
        jxc = np.einsum("nij,njk->nik", dpix_dxn, dxn_dxc)
        jin = np.zeros((xc.shape[0], 2, 3 + nd))
        jin[:, :, 0] = d[:, None] * xn
        jin[:, :, 1] = f * r2[:, None] * xn
        jin[:, :, 2] = f * (r2 * r2)[:, None] * xn
        jin[:, 0, 1 + nd] = 1.0
        jin[:, 1, 2 + nd] = 1.0
    else:
        m = xc[:, :2]
        r = np.sqrt(np.sum(m * m, axis=1))
        z = xc[:, 2]
        theta = np.arctan2(r, z)
        theta_d = _theta_poly(k, theta)
        dtd_dth = _theta_poly_deriv(k, theta)
        rho2 = r * r + z * z
        near_axis = r < 1e-12
        r_safe = np.where(near_axis, 1.0, r)
        u = m / r_safe[:, None]
        jxc = np.zeros((xc.shape[0], 2, 3))
        jin = np.zeros((xc.shape[0], 2, 3 + nd))
        # d theta / d (m, z)
        dth_dm = (z / rho2)[:, None] * u
        dth_dz = -r / rho2
        # d u / d m = (I - u u^T) / r
        uu = u[:, :, None] * u[:, None, :]
        du_dm = (np.eye(2) - uu) / r_safe[:, None, None]
        jxc[:, :, :2] = f * (
            theta_d[:, None, None] * du_dm
            + dtd_dth[:, None, None] * u[:, :, None] * dth_dm[:, None, :]
        )
        jxc[:, :, 2] = f * dtd_dth[:, None] * u * dth_dz[:, None]
        jin[:, :, 0] = theta_d[:, None] * u
        for i in range(nd):
            jin[:, :, 1 + i] = f * (theta ** (2 * i + 3))[:, None] * u
        jin[:, 0, 1 + nd] = 1.0
        jin[:, 1, 2 + nd] = 1.0
        if np.any(near_axis):
            # on-axis limit: pixel ~ f * m / z
            na = near_axis
            jxc[na] = 0.0
            jxc[na, 0, 0] = f / z[na]
            jxc[na, 1, 1] = f / z[na]
            jin[na] = 0.0
            jin[na, 0, 1 + nd] = 1.0
            jin[na, 1, 2 + nd] = 1.0

    J_xc[ok] = jxc
    J_intr[ok] = jin
    return pix, status, J_xc, J_intr


def _projection_point_jacobian(camera: CameraModel, pose: ViewPose, point: np.ndarray) -> np.ndarray:
    """d(pixel)/d(world point), 2x3, for an in-domain point."""
    _, _, J_xc, _ = project_with_jacobians(camera, pose, point[None, :])
    return J_xc[0] @ pose.R


def triangulation_angle(pose_i: ViewPose, pose_j: ViewPose, point: np.ndarray) -> float:
    """Angle in radians at `point` between the rays to the two camera centers.

    Symmetric in (i, j) bit-for-bit.
    """
    p = np.asarray(point, dtype=float)
    ri = pose_i.center() - p
    rj = pose_j.center() - p
    ni = math.sqrt(float(ri @ ri))
    nj = math.sqrt(float(rj @ rj))
    if ni < 1e-12 or nj < 1e-12:
        raise DegenerateGeometry("point coincides with a camera center")
    c = float(ri @ rj) / (ni * nj)
    return math.acos(min(1.0, max(-1.0, c)))


# ---------------------------------------------------------------------------
# epipolar algebra
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpipolarPair:
    """Fundamental matrix between an ordered view pair: x_j^T F x_i = 0."""

    F: np.ndarray
    match_count: int
    E: np.ndarray | None = None

    def __post_init__(self):
        F = np.asarray(self.F, dtype=float).reshape(3, 3).copy()
        F.flags.writeable = False
        object.__setattr__(self, "F", F)


def enforce_rank2(F: np.ndarray) -> np.ndarray:
    """Zero the smallest singular value of F."""
    u, s, vt = np.linalg.svd(F)
    s = s.copy()
    s[2] = 0.0
    return u @ np.diag(s) @ vt


def essential_from_fundamental(pair: EpipolarPair, K_i: np.ndarray, K_j: np.ndarray) -> np.ndarray:
    """E = K_j^T F K_i, scaled to unit Frobenius norm."""
    E = np.asarray(K_j).T @ pair.F @ np.asarray(K_i)
    n = np.linalg.norm(E)
    if n == 0:
        raise ValueError("zero essential matrix")
    return E / n


def decompose_essential(E: np.ndarray, bearings_i: np.ndarray, bearings_j: np.ndarray):
    """Recover the relative pose (j in i's frame: x_j = R x_i + t) from E.

    Picks the four-fold decomposition candidate with the most correspondences
    passing the positive-depth test in both views; t is unit length.

    Returns (ViewPose, inlier cheirality count). Raises AmbiguousDecomposition
    when the best and second-best candidates are within 5%.
    """
    E = np.asarray(E, dtype=float)
    u, s, vt = np.linalg.svd(E)
    if s[1] <= 0 or (s[0] - s[1]) > 0.1 * s[0] or s[2] > 0.1 * s[0]:
        raise ValueError(f"singular values {s} not an essential matrix signature")
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2]
    candidates = []
    for R in (u @ W @ vt, u @ W.T @ vt):
        for tt in (t, -t):
            candidates.append((R, tt))

    bi = np.atleast_2d(np.asarray(bearings_i, dtype=float))
    bj = np.atleast_2d(np.asarray(bearings_j, dtype=float))
    counts = []
    for R, tt in candidates:
        counts.append(int(np.sum(_cheirality_mask(R, tt, bi, bj))))
    order = np.argsort(counts)[::-1]
    best, second = counts[order[0]], counts[order[1]]
    if best == 0 or (best - second) < 0.05 * best:
        raise AmbiguousDecomposition(
            f"cheirality vote inconclusive: best {best}, second {second}"
        )
    R, tt = candidates[order[0]]
    tt = tt / np.linalg.norm(tt)
    return ViewPose.from_matrix(R, tt), best


def _cheirality_mask(R: np.ndarray, t: np.ndarray, bi: np.ndarray, bj: np.ndarray) -> np.ndarray:
    """Positive-depth test for bearings under x_j = R x_i + t."""
    # Solve per pair: l_i * (R b_i) - l_j * b_j = -t  in least squares.
    rb = bi @ R.T
    a11 = np.sum(rb * rb, axis=1)
    a12 = -np.sum(rb * bj, axis=1)
    a22 = np.sum(bj * bj, axis=1)
    b1 = -(rb @ t)
    b2 = bj @ t
    det = a11 * a22 - a12 * a12
    det = np.where(np.abs(det) < 1e-15, np.nan, det)
    li = (a22 * b1 - a12 * b2) / det
    lj = (a11 * b2 - a12 * b1) / det
    return (li > 0) & (lj > 0)


def sampson_distance(F: np.ndarray, x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """First-order geometric epipolar error in pixels, vectorized over rows."""
    xi = np.concatenate([np.atleast_2d(x_i), np.ones((len(np.atleast_2d(x_i)), 1))], axis=1)
    xj = np.concatenate([np.atleast_2d(x_j), np.ones((len(np.atleast_2d(x_j)), 1))], axis=1)
    Fxi = xi @ F.T
    Ftxj = xj @ F
    num = np.sum(xj * Fxi, axis=1)
    den = Fxi[:, 0] ** 2 + Fxi[:, 1] ** 2 + Ftxj[:, 0] ** 2 + Ftxj[:, 1] ** 2
    den = np.where(den <= 0, np.inf, den)
    return np.abs(num) / np.sqrt(den)


def symmetric_epipolar_distance(F: np.ndarray, x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """max over both directions of the point-to-epipolar-line distance (pixels)."""
    xi = np.concatenate([np.atleast_2d(x_i), np.ones((len(np.atleast_2d(x_i)), 1))], axis=1)
    xj = np.concatenate([np.atleast_2d(x_j), np.ones((len(np.atleast_2d(x_j)), 1))], axis=1)
    Fxi = xi @ F.T
    Ftxj = xj @ F
    num = np.abs(np.sum(xj * Fxi, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        d_j = num / np.hypot(Fxi[:, 0], Fxi[:, 1])
        d_i = num / np.hypot(Ftxj[:, 0], Ftxj[:, 1])
    d_j = np.where(np.isfinite(d_j), d_j, np.inf)
    d_i = np.where(np.isfinite(d_i), d_i, np.inf)
    return np.maximum(d_i, d_j)
