"""Oriented 3D boxes: corners, BEV footprints, rotated IoU, projection and NMS.

Boxes follow the KITTI label convention: ``center`` is the bottom-face
center, the box spans ``[y - h, y]`` vertically, and ``yaw`` is the
rotation about the camera y axis. Batched routines take ``(N, 7)`` arrays
laid out as ``[x, y, z, h, w, l, yaw]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera
from .geometry import project_points

AREA_EPS = 1e-12
# depth used in place of corners at or behind the camera plane
NEAR_CLAMP = 0.1


def normalize_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = np.mod(a + np.pi, 2 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2 * np.pi, out)
    # in-range values pass through untouched so round trips stay exact
    out = np.where((a > -np.pi) & (a <= np.pi), a, out)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class OrientedBox3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # (h, w, l)
    yaw: float

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise ValueError("center and size must have three components")
        if not all(v > 0 for v in s):
            raise ValueError(f"box sizes must be positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @property
    def h(self):
        return self.size[0]

    @property
    def w(self):
        return self.size[1]

    @property
    def l(self):  # noqa: E743
        return self.size[2]

    @property
    def geometric_center(self) -> np.ndarray:
        x, y, z = self.center
        return np.array([x, y - self.h / 2, z])

    def to_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw])

    @classmethod
    def from_array(cls, a) -> "OrientedBox3D":
        a = np.asarray(a, dtype=np.float64)
        return cls(tuple(a[:3]), tuple(a[3:6]), float(a[6]))


@dataclass(frozen=True)
class Roi2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if self.u_min > self.u_max or self.v_min > self.v_max:
            raise ValueError("Roi2D min must not exceed max")

    @property
    def center(self):
        return ((self.u_min + self.u_max) / 2, (self.v_min + self.v_max) / 2)

    @property
    def width(self):
        return self.u_max - self.u_min

    @property
    def height(self):
        return self.v_max - self.v_min

    def to_array(self):
        return np.array([self.u_min, self.v_min, self.u_max, self.v_max])


def as_box_array(boxes) -> np.ndarray:
    """Coerce a box, a sequence of boxes or an array to an (N, 7) float array."""
    if isinstance(boxes, OrientedBox3D):
        return boxes.to_array()[None]
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
    else:
        boxes = list(boxes)
        if not boxes:
            return np.zeros((0, 7))
        if isinstance(boxes[0], OrientedBox3D):
            arr = np.stack([b.to_array() for b in boxes])
        else:
            arr = np.asarray(boxes, dtype=np.float64)
    arr = arr.reshape(-1, 7)
    return arr


# local (x along length, z along width) footprint, counterclockwise in (x, z)
_FOOT = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]])


def _footprints(arr: np.ndarray) -> np.ndarray:
    """(N, 4, 2) BEV corners in (x, z)."""
    l, w, yaw = arr[:, 5], arr[:, 4], arr[:, 6]
    lx = _FOOT[None, :, 0] * l[:, None]
    lz = _FOOT[None, :, 1] * w[:, None]
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    x = c * lx + s * lz + arr[:, 0:1]
    z = -s * lx + c * lz + arr[:, 2:3]
    return np.stack([x, z], axis=-1)


def corners_array(boxes) -> np.ndarray:
    """(N, 8, 3) corners; bottom face first, then top face in the same order."""
    arr = as_box_array(boxes)
    foot = _footprints(arr)
    out = np.empty((len(arr), 8, 3))
    for k, y in ((0, arr[:, 1]), (4, arr[:, 1] - arr[:, 3])):
        out[:, k : k + 4, 0] = foot[..., 0]
        out[:, k : k + 4, 1] = y[:, None]
        out[:, k : k + 4, 2] = foot[..., 1]
    return out


def corners(box: OrientedBox3D) -> np.ndarray:
    return corners_array(box)[0]


def bev_polygon(box: OrientedBox3D) -> np.ndarray:
    return _footprints(box.to_array()[None])[0]


def bev_polygons(boxes) -> np.ndarray:
    return _footprints(as_box_array(boxes))


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for counterclockwise vertex order."""
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_polygon(subject, clip):
    """Sutherland-Hodgman clip of ``subject`` by the convex ccw polygon ``clip``."""
    out = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        src, out = out, []
        prev = src[-1]
        d_prev = side(prev)
        for cur in src:
            d_cur = side(cur)
            if d_cur >= 0:
                if d_prev < 0:
                    t = d_prev / (d_prev - d_cur)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif d_prev >= 0:
                t = d_prev / (d_prev - d_cur)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, d_prev = cur, d_cur
    return out


def bev_intersection_area(a: OrientedBox3D, b: OrientedBox3D) -> float:
    area = polygon_area(clip_polygon(bev_polygon(a), bev_polygon(b)))
    return area if area >= AREA_EPS else 0.0


def _vertical_overlap(a_y, a_h, b_y, b_h):
    return np.maximum(0.0, np.minimum(a_y, b_y) - np.maximum(a_y - a_h, b_y - b_h))


def iou_bev(a: OrientedBox3D, b: OrientedBox3D) -> float:
    inter = bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.w * a.l + b.w * b.l - inter
    return min(1.0, inter / union)


def iou_3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    inter = bev_intersection_area(a, b) * float(_vertical_overlap(a.center[1], a.h, b.center[1], b.h))
    if inter <= 0.0:
        return 0.0
    va, vb = a.h * a.w * a.l, b.h * b.w * b.l
    return min(1.0, inter / (va + vb - inter))


# ---------------------------------------------------------------------------
# batched clipping

_MAXV = 8


def _clip_areas(subj: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Pairwise intersection areas of ccw quads ``subj[i]`` and ``clip[i]``.

    Vectorized Sutherland-Hodgman: polygons live in fixed (N, 8, 2) buffers
    with per-row vertex counts; a convex quad clipped by four half-planes
    never exceeds eight vertices.
    """
    n = len(subj)
    if n == 0:
        return np.zeros(0)
    poly = np.zeros((n, _MAXV, 2))
    poly[:, :4] = subj
    cnt = np.full(n, 4)
    rows = np.arange(n)[:, None]
    idx = np.arange(_MAXV)[None, :]
    for e in range(4):
        a = clip[:, e]
        edge = clip[:, (e + 1) % 4] - a
        valid = idx < cnt[:, None]
        prev_idx = np.where(idx == 0, cnt[:, None] - 1, idx - 1)
        cur = poly
        prev = poly[rows, np.maximum(prev_idx, 0)]
        d_cur = edge[:, None, 0] * (cur[..., 1] - a[:, None, 1]) - edge[:, None, 1] * (cur[..., 0] - a[:, None, 0])
        d_prev = np.take_along_axis(d_cur, np.maximum(prev_idx, 0), axis=1)
        in_cur = d_cur >= 0
        in_prev = d_prev >= 0
        cross = (in_cur != in_prev) & valid
        denom = np.where(cross, d_prev - d_cur, 1.0)
        t = np.where(cross, d_prev / denom, 0.0)
        inter = prev + t[..., None] * (cur - prev)
        cand = np.stack([inter, cur], axis=2).reshape(n, 2 * _MAXV, 2)
        keep = np.stack([cross, in_cur & valid], axis=2).reshape(n, 2 * _MAXV)
        order = np.argsort(~keep, axis=1, kind="stable")[:, :_MAXV]
        poly = np.take_along_axis(cand, order[..., None], axis=1)
        cnt = np.minimum(keep.sum(axis=1), _MAXV)
    valid = idx < cnt[:, None]
    nxt = np.where(idx + 1 < cnt[:, None], idx + 1, 0)
    pn = np.take_along_axis(poly, nxt[..., None], axis=1)
    cross = poly[..., 0] * pn[..., 1] - pn[..., 0] * poly[..., 1]
    area = 0.5 * np.where(valid, cross, 0.0).sum(axis=1)
    area[cnt < 3] = 0.0
    area[area < AREA_EPS] = 0.0
    return area


def _near_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairs whose circumscribed BEV circles touch (candidates for overlap)."""
    ra = 0.5 * np.hypot(a[:, 4], a[:, 5])
    rb = 0.5 * np.hypot(b[:, 4], b[:, 5])
    d = np.hypot(a[:, 0] - b[:, 0], a[:, 2] - b[:, 2])
    return d <= ra + rb


def bev_intersection_pairs(a, b) -> np.ndarray:
    """Elementwise BEV intersection areas of two (N, 7) box arrays."""
    a, b = as_box_array(a), as_box_array(b)
    out = np.zeros(len(a))
    near = _near_pairs(a, b)
    if near.any():
        out[near] = _clip_areas(_footprints(a[near]), _footprints(b[near]))
    return out


def iou_bev_pairs(a, b) -> np.ndarray:
    a, b = as_box_array(a), as_box_array(b)
    inter = bev_intersection_pairs(a, b)
    union = a[:, 4] * a[:, 5] + b[:, 4] * b[:, 5] - inter
    return np.minimum(1.0, np.where(inter > 0, inter / union, 0.0))


def iou_3d_pairs(a, b) -> np.ndarray:
    a, b = as_box_array(a), as_box_array(b)
    inter = bev_intersection_pairs(a, b) * _vertical_overlap(a[:, 1], a[:, 3], b[:, 1], b[:, 3])
    union = np.prod(a[:, 3:6], axis=1) + np.prod(b[:, 3:6], axis=1) - inter
    return np.minimum(1.0, np.where(inter > 0, inter / union, 0.0))


def _matrix(fn, a, b) -> np.ndarray:
    a, b = as_box_array(a), as_box_array(b)
    ia, ib = np.meshgrid(np.arange(len(a)), np.arange(len(b)), indexing="ij")
    return fn(a[ia.ravel()], b[ib.ravel()]).reshape(len(a), len(b))


def iou_bev_matrix(a, b) -> np.ndarray:
    """(len(a), len(b)) BEV IoU matrix."""
    return _matrix(iou_bev_pairs, a, b)


def iou_3d_matrix(a, b) -> np.ndarray:
    return _matrix(iou_3d_pairs, a, b)


# ---------------------------------------------------------------------------
# projection


def project_boxes(p, boxes, image_size=None) -> np.ndarray:
    """(N, 4) 2D hulls ``[u_min, v_min, u_max, v_max]`` of projected boxes.

    Hulls are clipped to ``image_size`` (W, H) unless it is None. Corners at
    or behind the camera plane are pulled to ``NEAR_CLAMP`` meters in depth
    so boxes straddling the camera still produce a bounded hull. Rows for
    boxes entirely behind the camera are NaN.
    """
    c = corners_array(boxes)
    behind = (c[..., 2] <= 0).all(axis=1)
    c = c.copy()
    c[..., 2] = np.maximum(c[..., 2], NEAR_CLAMP)
    uv = project_points(p, c)
    out = np.stack([uv[..., 0].min(axis=1), uv[..., 1].min(axis=1), uv[..., 0].max(axis=1), uv[..., 1].max(axis=1)], axis=1)
    if image_size is not None:
        w, h = image_size
        out = np.clip(out, 0, [w, h, w, h])
    out[behind] = np.nan
    return out


def project_box(p, box: OrientedBox3D, image_size) -> Roi2D:
    roi = project_boxes(p, box, image_size)[0]
    if np.isnan(roi).any():
        raise BehindCamera("all box corners are behind the camera")
    return Roi2D(*(float(v) for v in roi))


# ---------------------------------------------------------------------------
# NMS


def _frame_overlap(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Area of rectangle ``fa`` intersected with the bounding box of ``fb`` in fa's frame."""
    u = fa[:, 0] - fa[:, 1]
    v = fa[:, 1] - fa[:, 2]
    out = np.ones(len(fa))
    for axis in (u, v):
        axis = axis / np.linalg.norm(axis, axis=1, keepdims=True)
        pa = np.einsum("nkd,nd->nk", fa, axis)
        pb = np.einsum("nkd,nd->nk", fb, axis)
        lo = np.maximum(pa.min(axis=1), pb.min(axis=1))
        hi = np.minimum(pa.max(axis=1), pb.max(axis=1))
        out *= np.maximum(hi - lo, 0.0)
    return out


def _iou_bev_upper(fa: np.ndarray, fb: np.ndarray, area_a: float, area_b: np.ndarray) -> np.ndarray:
    """Upper bound on BEV IoU of footprint ``fa`` (4, 2) with each of ``fb`` (m, 4, 2).

    The intersection lies inside each rectangle clipped to the other's
    bounding box in its own frame; the bound is exact for yaw differences
    that are multiples of pi/2.
    """
    fa = np.broadcast_to(fa, fb.shape)
    inter = np.minimum(_frame_overlap(fa, fb), _frame_overlap(fb, fa))
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms_bev_arrays(boxes, scores, iou_threshold: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy BEV NMS over an (N, 7) array. Ties in score go to the lower index."""
    arr = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in [0, 1]")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n = len(arr)
    if max_keep is None:
        max_keep = n
    order = np.lexsort((np.arange(n), -scores))
    arr = arr[order]
    radius = 0.5 * np.hypot(arr[:, 4], arr[:, 5])
    foot = _footprints(arr)
    area = arr[:, 4] * arr[:, 5]
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in range(n):
        if not alive[i]:
            continue
        keep.append(order[i])
        if len(keep) >= max_keep:
            break
        rest = np.nonzero(alive[i + 1 :])[0] + i + 1
        if len(rest) == 0:
            continue
        d = np.hypot(arr[rest, 0] - arr[i, 0], arr[rest, 2] - arr[i, 2])
        rest = rest[d <= radius[rest] + radius[i]]
        if len(rest) == 0:
            continue
        bound = _iou_bev_upper(foot[i], foot[rest], area[i], area[rest])
        rest = rest[bound > iou_threshold - 1e-9]
        if len(rest) == 0:
            continue
        ious = iou_bev_pairs(np.repeat(arr[i : i + 1], len(rest), axis=0), arr[rest])
        alive[rest[ious > iou_threshold]] = False
    return np.asarray(keep, dtype=np.int64)


def nms_bev(detections, iou_threshold: float, max_keep: int | None = None) -> list[int]:
    """Greedy descending-score suppression over ``(box, score)`` pairs."""
    detections = list(detections)
    if not detections:
        return []
    boxes = as_box_array([d[0] for d in detections])
    scores = [d[1] for d in detections]
    return [int(i) for i in nms_bev_arrays(boxes, scores, iou_threshold, max_keep)]
