"""rigcal: self-calibration and pose estimation for rigid multi-view sets.

The package recovers camera intrinsics (focal length, radial or fisheye
distortion, principal point) and extrinsics for small view sets from
precomputed dense warp fields, via cycle-consistent correspondence sampling,
triangulation-angle scoring, focal self-calibration and staged bundle
adjustment, in either an incremental or a global (pose-initialized) pipeline.
"""

__version__ = "0.1.0"

from . import ba, cli, evalsynth, geometry, pipeline, robustest, sampling, selfcal, warpio

__all__ = [
    "ba",
    "cli",
    "evalsynth",
    "geometry",
    "pipeline",
    "robustest",
    "sampling",
    "selfcal",
    "warpio",
]
