"""Pinhole and rectified-stereo camera model.

Camera frame: x right, y down, z forward, meters. Projection matrices are
KITTI-style 3x4 arrays mapping homogeneous camera points to homogeneous
pixels.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRig, MalformedMatrix, MissingMatrix, NonPositiveDepth

MIN_DEPTH = 1e-6


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def projection_matrix(focal_px, principal_point, tx_px=0.0):
    """Build a rectified projection matrix with horizontal offset ``tx_px`` (= -f*b)."""
    cx, cy = principal_point
    return np.array(
        [[focal_px, 0.0, cx, tx_px], [0.0, focal_px, cy, 0.0], [0.0, 0.0, 1.0, 0.0]]
    )


@dataclass(frozen=True)
class StereoCalibration:
    """A rectified stereo rig: left/right 3x4 projections and image size (w, h)."""

    p_left: np.ndarray
    p_right: np.ndarray
    image_size: tuple[int, int]
    focal_px: float = field(init=False)
    principal_point: tuple[float, float] = field(init=False)
    baseline_m: float = field(init=False)

    def __post_init__(self):
        pl, pr = _frozen(self.p_left), _frozen(self.p_right)
        if pl.shape != (3, 4) or pr.shape != (3, 4):
            raise MalformedMatrix("projection matrices must be 3x4")
        w, h = (int(v) for v in self.image_size)
        if w <= 0 or h <= 0:
            raise ValueError("image_size must be positive")
        f = float(pl[0, 0])
        if not f > 0:
            raise DegenerateRig(f"focal length must be positive, got {f}")
        # difference form keeps real KITTI P2/P3 pairs (P2 carries its own offset)
        baseline = float(pl[0, 3] - pr[0, 3]) / f
        if not baseline > 0:
            raise DegenerateRig(f"baseline must be positive, got {baseline}")
        object.__setattr__(self, "p_left", pl)
        object.__setattr__(self, "p_right", pr)
        object.__setattr__(self, "image_size", (w, h))
        object.__setattr__(self, "focal_px", f)
        object.__setattr__(self, "principal_point", (float(pl[0, 2]), float(pl[1, 2])))
        object.__setattr__(self, "baseline_m", baseline)

    @classmethod
    def from_rig(cls, focal_px, principal_point, baseline_m, image_size):
        """Synthetic rectified rig; the left camera sits at the origin."""
        if baseline_m <= 0:
            raise DegenerateRig(f"baseline must be positive, got {baseline_m}")
        return cls(
            projection_matrix(focal_px, principal_point),
            projection_matrix(focal_px, principal_point, -focal_px * baseline_m),
            image_size,
        )

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def scaled(self, sx: float, sy: float, image_size) -> "StereoCalibration":
        """Calibration of the same rig after resizing images by (sx, sy)."""
        s = np.diag([sx, sy, 1.0])
        return StereoCalibration(s @ self.p_left, s @ self.p_right, image_size)

    def disparity(self, depth):
        """Horizontal disparity in pixels of a point at ``depth`` meters."""
        return self.focal_px * self.baseline_m / np.asarray(depth, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, StereoCalibration):
            return NotImplemented
        return (
            self.image_size == other.image_size
            and np.array_equal(self.p_left, other.p_left)
            and np.array_equal(self.p_right, other.p_right)
        )

    def __hash__(self):
        return hash((self.image_size, self.p_left.tobytes(), self.p_right.tobytes()))


def project(p, point) -> np.ndarray:
    """Project one camera-frame point to pixel (u, v)."""
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (3,):
        raise ValueError("point must be a 3-vector")
    if point[2] <= MIN_DEPTH:
        raise NonPositiveDepth(f"point depth {point[2]} is not in front of the camera")
    hom = np.asarray(p, dtype=np.float64) @ np.append(point, 1.0)
    return hom[:2] / hom[2]


def project_points(p, points) -> np.ndarray:
    """Vectorized projection of (..., 3) points. No depth check is made."""
    points = np.asarray(points, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    hom = points @ p[:, :3].T + p[:, 3]
    return hom[..., :2] / hom[..., 2:3]


def frustum_mask(calib: StereoCalibration, points, depth_range) -> np.ndarray:
    """Vectorized :func:`in_frustum` over (..., 3) points."""
    near, far = depth_range
    if not near < far:
        raise ValueError("depth_range must satisfy near < far")
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    ok = (z > near) & (z <= far) & (z > MIN_DEPTH)
    uv = project_points(calib.p_left, np.where(ok[..., None], points, [0.0, 0.0, 1.0]))
    w, h = calib.image_size
    ok &= (uv[..., 0] >= 0) & (uv[..., 0] < w) & (uv[..., 1] >= 0) & (uv[..., 1] < h)
    return ok


def in_frustum(calib: StereoCalibration, point, depth_range) -> bool:
    return bool(frustum_mask(calib, np.asarray(point, dtype=np.float64)[None], depth_range)[0])


_LINE = re.compile(r"^\s*([A-Za-z_][\w]*)\s*:\s*(.*)$")


def _read_matrices(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        m = _LINE.match(line)
        if m:
            out[m.group(1)] = m.group(2)
    return out


def _parse_matrix(key: str, body: str) -> np.ndarray:
    parts = body.split()
    if len(parts) != 12:
        raise MalformedMatrix(f"{key}: expected 12 values, got {len(parts)}")
    try:
        vals = [float(v) for v in parts]
    except ValueError as exc:
        raise MalformedMatrix(f"{key}: {exc}") from None
    return np.array(vals, dtype=np.float64).reshape(3, 4)


def parse_calibration(text: str, image_size=(1242, 375), left_key="P2", right_key="P3"):
    """Parse a KITTI calibration file, consuming only the stereo pair.

    Other keys (P0, P1, R0_rect, Tr_velo_to_cam, ...) and non-matching lines
    are ignored, so line order and comments do not matter. Pass
    ``left_key="P0", right_key="P1"`` for the grayscale pair. KITTI files do
    not record the image size; an optional ``image_size: W H`` line written by
    :func:`serialize_calibration` overrides the ``image_size`` argument.
    """
    mats = _read_matrices(text)
    for key in (left_key, right_key):
        if key not in mats:
            raise MissingMatrix(f"calibration has no {key} line")
    if "image_size" in mats:
        try:
            w, h = (int(v) for v in mats["image_size"].split())
        except ValueError:
            raise MalformedMatrix("image_size: expected two integers") from None
        image_size = (w, h)
    return StereoCalibration(
        _parse_matrix(left_key, mats[left_key]),
        _parse_matrix(right_key, mats[right_key]),
        image_size,
    )


def serialize_calibration(calib: StereoCalibration, left_key="P2", right_key="P3") -> str:
    lines = []
    for key, p in ((left_key, calib.p_left), (right_key, calib.p_right)):
        lines.append(f"{key}: " + " ".join(repr(float(v)) for v in p.ravel()))
    lines.append("image_size: %d %d" % calib.image_size)
    return "\n".join(lines) + "\n"
