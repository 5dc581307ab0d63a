"""Dense warp-field file format, view-set manifests and pose files.

A warp field stands in for a live dense matcher: for every source pixel it
stores a sub-pixel destination coordinate and a confidence. Warps are
directed; (i -> j) and (j -> i) are independent files.

Binary layout (little-endian): magic ``RWF1``, four u32 fields
``src_width, src_height, dst_width, dst_height``, then ``src_height x
src_width`` records of ``(f32 tx, f32 ty, f32 confidence)`` in row-major
order. Source pixel centers sit at integer coordinates. Confidence is in
[0, 1]; the sentinel -1 marks an invalid pixel. NaN anywhere is a hard
validation error.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RWF1"
INVALID_CONFIDENCE = -1.0
_HEADER = struct.Struct("<4sIIII")
_REC_BYTES = 12  # 3 * f32


class WarpFormatError(ValueError):
    """Warp file validation failure; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagic(WarpFormatError):
    pass


class TruncatedFile(WarpFormatError):
    pass


class DimensionMismatch(WarpFormatError):
    pass


class NonFiniteEntry(WarpFormatError):
    pass


class InvalidConfidence(WarpFormatError):
    pass


class OutOfRangeTarget(WarpFormatError):
    pass


class OutOfBounds(IndexError):
    """Lookup outside the warp grid."""


class ManifestError(ValueError):
    pass


class ParseError(ManifestError):
    pass


class UnknownView(ManifestError):
    pass


class DuplicateWarp(ManifestError):
    pass


@dataclass
class WarpField:
    """Validated dense correspondence field for one ordered view pair."""

    src_view: str
    dst_view: str
    width: int          # warp (source) resolution
    height: int
    dst_width: int      # destination grid the targets point into
    dst_height: int
    target: np.ndarray      # (height, width, 2) float64, destination coords
    confidence: np.ndarray  # (height, width) float64, [0,1] or -1

    @property
    def valid(self) -> np.ndarray:
        return self.confidence > 0.0


def read_warp(path, src_view: str = "", dst_view: str = "",
              expect_src: tuple | None = None, expect_dst: tuple | None = None) -> WarpField:
    """Read and fully validate a warp file.

    ``expect_src``/``expect_dst`` are optional (width, height) cross-checks
    against other files of the same view set.
    """
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}", 0)
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"{path}: header incomplete", len(data))
    _, sw, sh, dw, dh = _HEADER.unpack_from(data, 0)
    if min(sw, sh, dw, dh) == 0:
        raise DimensionMismatch(f"{path}: zero dimension in header {sw}x{sh} -> {dw}x{dh}", 4)
    if expect_src is not None and (sw, sh) != tuple(expect_src):
        raise DimensionMismatch(
            f"{path}: source resolution {sw}x{sh} != expected {expect_src[0]}x{expect_src[1]}", 4)
    if expect_dst is not None and (dw, dh) != tuple(expect_dst):
        raise DimensionMismatch(
            f"{path}: destination resolution {dw}x{dh} != expected {expect_dst[0]}x{expect_dst[1]}", 12)
    need = _HEADER.size + sw * sh * _REC_BYTES
    if len(data) < need:
        raise TruncatedFile(f"{path}: payload ends early, need {need} bytes", len(data))
    if len(data) > need:
        raise DimensionMismatch(f"{path}: {len(data) - need} trailing bytes after payload", need)
    raw = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(sh, sw, 3)

    bad = ~np.isfinite(raw)
    if np.any(bad):
        flat = int(np.flatnonzero(bad.reshape(-1))[0])
        raise NonFiniteEntry(f"{path}: non-finite payload value", _HEADER.size + 4 * flat)

    conf = raw[:, :, 2].astype(np.float64)
    ok_conf = ((conf >= 0.0) & (conf <= 1.0)) | (conf == INVALID_CONFIDENCE)
    if not np.all(ok_conf):
        idx = int(np.flatnonzero(~ok_conf.reshape(-1))[0])
        raise InvalidConfidence(
            f"{path}: confidence {conf.reshape(-1)[idx]} outside [0,1] and not the sentinel",
            _HEADER.size + idx * _REC_BYTES + 8)

    target = raw[:, :, :2].astype(np.float64)
    valid = conf > 0.0
    in_x = (target[:, :, 0] >= -0.5) & (target[:, :, 0] <= dw - 0.5)
    in_y = (target[:, :, 1] >= -0.5) & (target[:, :, 1] <= dh - 0.5)
    bad_target = valid & ~(in_x & in_y)
    if np.any(bad_target):
        idx = int(np.flatnonzero(bad_target.reshape(-1))[0])
        raise OutOfRangeTarget(
            f"{path}: valid pixel targets outside destination bounds {dw}x{dh}",
            _HEADER.size + idx * _REC_BYTES)

    # mask invalid pixels so downstream numerics never meet stray values
    target = target.copy()
    target[~valid] = 0.0
    conf = conf.copy()
    conf[~valid] = INVALID_CONFIDENCE
    return WarpField(src_view=src_view, dst_view=dst_view, width=int(sw), height=int(sh),
                     dst_width=int(dw), dst_height=int(dh), target=target, confidence=conf)


def write_warp(path, field: WarpField) -> None:
    """Inverse of read_warp: emits a bit-exact RWF1 file."""
    h, w = field.height, field.width
    if field.target.shape != (h, w, 2) or field.confidence.shape != (h, w):
        raise ValueError("warp arrays disagree with declared resolution")
    rec = np.empty((h, w, 3), dtype="<f4")
    rec[:, :, :2] = field.target
    rec[:, :, 2] = field.confidence
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, w, h, field.dst_width, field.dst_height))
        fh.write(rec.tobytes())


def lookup(field: WarpField, pixel) -> np.ndarray | None:
    """Sub-pixel target stored at an integer source pixel; None when masked."""
    x, y = int(pixel[0]), int(pixel[1])
    if not (0 <= x < field.width and 0 <= y < field.height):
        raise OutOfBounds(f"pixel ({x}, {y}) outside {field.width}x{field.height} warp")
    if not field.confidence[y, x] > 0.0:
        return None
    return field.target[y, x].copy()


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewSpec:
    id: str
    width: int
    height: int
    image: str | None = None


@dataclass(frozen=True)
class WarpSpec:
    src: str
    dst: str
    path: str


@dataclass
class ViewSetManifest:
    views: list
    warps: list
    init_poses: str | None
    gt_poses: str | None
    directory: str

    @property
    def view_ids(self) -> list:
        return [v.id for v in self.views]

    def view(self, view_id: str) -> ViewSpec:
        for v in self.views:
            if v.id == view_id:
                return v
        raise UnknownView(f"view {view_id!r} not in manifest")


def read_manifest(path) -> ViewSetManifest:
    """Parse and validate a view-set manifest (UTF-8 JSON).

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError(f"{path}: {e}") from e
    if not isinstance(doc, dict) or "views" not in doc or "warps" not in doc:
        raise ParseError(f"{path}: manifest must be an object with 'views' and 'warps'")
    base = path.parent

    def resolve(p):
        return str((base / p) if not Path(p).is_absolute() else Path(p))

    views = []
    seen = set()
    for entry in doc["views"]:
        try:
            vid = str(entry["id"])
            spec = ViewSpec(id=vid, width=int(entry["width"]), height=int(entry["height"]),
                            image=resolve(entry["image"]) if entry.get("image") else None)
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"{path}: bad view entry {entry!r}: {e}") from e
        if spec.width <= 0 or spec.height <= 0:
            raise ParseError(f"{path}: view {vid!r} has non-positive size")
        if vid in seen:
            raise ParseError(f"{path}: duplicate view id {vid!r}")
        seen.add(vid)
        views.append(spec)

    warps = []
    pairs = set()
    for entry in doc["warps"]:
        try:
            src, dst, wpath = str(entry["src"]), str(entry["dst"]), str(entry["path"])
        except (KeyError, TypeError) as e:
            raise ParseError(f"{path}: bad warp entry {entry!r}: {e}") from e
        for vid in (src, dst):
            if vid not in seen:
                raise UnknownView(f"{path}: warp references undeclared view {vid!r}")
        if src == dst:
            raise ParseError(f"{path}: warp from {src!r} to itself")
        if (src, dst) in pairs:
            raise DuplicateWarp(f"{path}: duplicate warp entry ({src!r}, {dst!r})")
        pairs.add((src, dst))
        warps.append(WarpSpec(src=src, dst=dst, path=resolve(wpath)))

    return ViewSetManifest(
        views=views,
        warps=warps,
        init_poses=resolve(doc["init_poses"]) if doc.get("init_poses") else None,
        gt_poses=resolve(doc["gt_poses"]) if doc.get("gt_poses") else None,
        directory=str(base),
    )


def write_manifest(path, views, warps, init_poses=None, gt_poses=None) -> None:
    doc = {
        "views": [
            {k: v for k, v in
             dict(id=s.id, width=s.width, height=s.height, image=s.image).items()
             if v is not None}
            for s in views
        ],
        "warps": [dict(src=w.src, dst=w.dst, path=w.path) for w in warps],
    }
    if init_poses:
        doc["init_poses"] = init_poses
    if gt_poses:
        doc["gt_poses"] = gt_poses
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", "utf-8")


def load_warps(manifest: ViewSetManifest) -> dict:
    """Read every warp of the set, cross-checking per-view grid resolutions.

    Warps sharing a source view must agree on source resolution, and every
    warp into a view must agree with that view's source resolution, so that
    cycle chains index consistent grids.
    """
    fields = {}
    res = {}
    for spec in manifest.warps:
        f = read_warp(spec.path, src_view=spec.src, dst_view=spec.dst)
        fields[(spec.src, spec.dst)] = f
        for vid, shape in ((spec.src, (f.width, f.height)), (spec.dst, (f.dst_width, f.dst_height))):
            if vid in res and res[vid] != shape:
                raise DimensionMismatch(
                    f"{spec.path}: view {vid!r} grid {shape} conflicts with {res[vid]}", 4)
            res.setdefault(vid, shape)
    return fields


def warp_resolution(fields: dict, view_id: str) -> tuple:
    """(width, height) of the warp grid attached to a view."""
    for (src, _), f in fields.items():
        if src == view_id:
            return (f.width, f.height)
    for (_, dst), f in fields.items():
        if dst == view_id:
            return (f.dst_width, f.dst_height)
    raise UnknownView(f"view {view_id!r} has no warps")


def warp_to_image_scale(manifest: ViewSetManifest, fields: dict, view_id: str) -> tuple:
    """Per-axis scale factors from warp-grid pixels to image pixels."""
    spec = manifest.view(view_id)
    w, h = warp_resolution(fields, view_id)
    return (spec.width / w, spec.height / h)


def warp_to_image(xy: np.ndarray, scale: tuple) -> np.ndarray:
    """Map warp-resolution pixel-center coordinates to image pixel centers."""
    xy = np.asarray(xy, dtype=float)
    sx, sy = scale
    out = np.empty_like(xy)
    out[..., 0] = (xy[..., 0] + 0.5) * sx - 0.5
    out[..., 1] = (xy[..., 1] + 0.5) * sy - 0.5
    return out


# ---------------------------------------------------------------------------
# pose files: one line per view, `view_id qw qx qy qz tx ty tz`, world-to-camera
# ---------------------------------------------------------------------------


def read_pose_file(path) -> dict:
    """Read `view_id qw qx qy qz tx ty tz` lines into {view_id: ViewPose}."""
    from .geometry import ViewPose

    poses = {}
    for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        vid = parts[0]
        try:
            vals = [float(x) for x in parts[1:]]
        except ValueError as e:
            raise ParseError(f"{path}:{lineno}: {e}") from e
        if vid in poses:
            raise ParseError(f"{path}:{lineno}: duplicate view {vid!r}")
        poses[vid] = ViewPose(np.array(vals[:4]), np.array(vals[4:]))
    return poses


def write_pose_file(path, poses: dict) -> None:
    lines = []
    for vid in poses:
        p = poses[vid]
        vals = " ".join(format(float(x), ".17g") for x in [*p.q, *p.t])
        lines.append(f"{vid} {vals}")
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")
