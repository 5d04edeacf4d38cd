"""Front-view objectness grid, 3D anchor pool and anchor/box offset encoding."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .box3d import OrientedBox3D, as_box_array, normalize_angle
from .errors import EmptyClass
from .geometry import MIN_DEPTH, StereoCalibration, frustum_mask, project_points

FOREGROUND_RADIUS = 1.8  # in cell widths
ANCHOR_YAWS = (0.0, math.pi / 2)
DEFAULT_DEPTH_RANGE = (0.5, 70.0)


@dataclass(frozen=True)
class FrontViewGrid:
    g_x: int
    g_y: int
    cell_w_px: float
    cell_h_px: float

    @classmethod
    def from_image(cls, image_size, stride: int = 16) -> "FrontViewGrid":
        w, h = image_size
        g_x, g_y = max(1, w // stride), max(1, h // stride)
        return cls(g_x, g_y, w / g_x, h / g_y)

    @property
    def shape(self):
        return (self.g_y, self.g_x)

    def cell_centers(self) -> np.ndarray:
        """(g_y, g_x, 2) pixel centers (u, v)."""
        u = (np.arange(self.g_x) + 0.5) * self.cell_w_px
        v = (np.arange(self.g_y) + 0.5) * self.cell_h_px
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv], axis=-1)

    def cell_of(self, uv) -> np.ndarray:
        """(..., 2) integer (row, col) of the cells containing pixel points."""
        uv = np.asarray(uv, dtype=np.float64)
        col = np.clip(np.floor(uv[..., 0] / self.cell_w_px), 0, self.g_x - 1)
        row = np.clip(np.floor(uv[..., 1] / self.cell_h_px), 0, self.g_y - 1)
        return np.stack([row, col], axis=-1).astype(np.int64)


@dataclass(frozen=True)
class AnchorPrior:
    class_name: str
    mean_size: tuple[float, float, float]  # (h, w, l)

    def __post_init__(self):
        size = tuple(float(v) for v in self.mean_size)
        if len(size) != 3 or not all(v > 0 for v in size):
            raise ValueError(f"prior size must be three positive values, got {self.mean_size}")
        object.__setattr__(self, "mean_size", size)


@dataclass(frozen=True)
class Anchor:
    box: OrientedBox3D
    prior_index: int
    cell: tuple[int, int]


@dataclass(frozen=True)
class OffsetTarget:
    d_center: tuple[float, float, float]
    d_size: tuple[float, float, float]
    orientation: tuple[float, float]

    def to_array(self) -> np.ndarray:
        return np.array([*self.d_center, *self.d_size, *self.orientation])

    @classmethod
    def from_array(cls, a) -> "OffsetTarget":
        a = np.asarray(a, dtype=np.float64)
        return cls(tuple(a[0:3]), tuple(a[3:6]), tuple(a[6:8]))


class AnchorPool:
    """Anchors stored column-wise: ``boxes`` (N, 7), ``prior_index`` (N,), ``cells`` (N, 2)."""

    def __init__(self, boxes, prior_index, cells):
        self.boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
        self.prior_index = np.asarray(prior_index, dtype=np.int64)
        self.cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        if not len(self.boxes) == len(self.prior_index) == len(self.cells):
            raise ValueError("anchor pool columns differ in length")

    def __len__(self):
        return len(self.boxes)

    def __getitem__(self, i) -> Anchor:
        return Anchor(
            OrientedBox3D.from_array(self.boxes[i]),
            int(self.prior_index[i]),
            (int(self.cells[i, 0]), int(self.cells[i, 1])),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, index) -> "AnchorPool":
        return AnchorPool(self.boxes[index], self.prior_index[index], self.cells[index])


# ---------------------------------------------------------------------------


def projected_centers(calib: StereoCalibration, boxes) -> tuple[np.ndarray, np.ndarray]:
    """Left-image projections of the geometric box centers and a validity mask."""
    arr = as_box_array(boxes)
    c = arr[:, :3].copy()
    c[:, 1] -= arr[:, 3] / 2
    ok = c[:, 2] > MIN_DEPTH
    uv = project_points(calib.p_left, np.where(ok[:, None], c, [0.0, 0.0, 1.0]))
    return uv, ok


def frontview_targets(gts, calib: StereoCalibration, grid: FrontViewGrid) -> np.ndarray:
    """Binary (g_y, g_x) map of cells near a projected ground-truth center."""
    target = np.zeros(grid.shape, dtype=np.int64)
    arr = as_box_array(gts)
    if len(arr) == 0:
        return target
    uv, ok = projected_centers(calib, arr)
    uv = uv[ok]
    if len(uv) == 0:
        return target
    centers = grid.cell_centers()
    d = np.linalg.norm(centers[:, :, None, :] - uv[None, None], axis=-1).min(axis=-1)
    target[d < FOREGROUND_RADIUS * grid.cell_w_px] = 1
    return target


def compute_prior_sizes(labels, classes=None) -> list[AnchorPrior]:
    """Per-class mean (h, w, l) over a stream of labels.

    ``labels`` yields objects with ``class_name`` and ``size`` attributes.
    With ``classes=None`` every class seen (except DontCare) gets a prior.
    """
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for lab in labels:
        name = lab.class_name
        sums[name] = sums.get(name, 0.0) + np.asarray(lab.size, dtype=np.float64)
        counts[name] = counts.get(name, 0) + 1
    if classes is None:
        classes = sorted(k for k in sums if k != "DontCare")
    priors = []
    for name in classes:
        if counts.get(name, 0) == 0:
            raise EmptyClass(f"no training samples of class {name!r}")
        priors.append(AnchorPrior(name, tuple(sums[name] / counts[name])))
    return priors


class PriorSizeEstimator(BaseEstimator):
    """Estimator wrapper around :func:`compute_prior_sizes`."""

    def __init__(self, classes=None):
        self.classes = classes

    def fit(self, labels, y=None):
        self.priors_ = compute_prior_sizes(labels, self.classes)
        return self

    def transform(self, labels=None):
        return self.priors_


def format_prior_table(priors) -> str:
    return "".join(f"{p.class_name} {p.mean_size[0]:.6f} {p.mean_size[1]:.6f} {p.mean_size[2]:.6f}\n" for p in priors)


def parse_prior_table(text: str) -> list[AnchorPrior]:
    priors = []
    for line in text.splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 4:
            raise ValueError(f"prior table line needs 'class h w l': {line!r}")
        priors.append(AnchorPrior(parts[0], tuple(float(v) for v in parts[1:])))
    return priors


def lattice_points(calib: StereoCalibration, grid_interval_m: float, depth_range, ground_y: float) -> np.ndarray:
    """(K, 3) ground-plane lattice points (m*d, ground_y, n*d) inside the frustum.

    Ordered by depth row then lateral index, so results are deterministic.
    """
    if not grid_interval_m > 0:
        raise ValueError("grid_interval_m must be positive")
    near, far = depth_range
    step = float(grid_interval_m)
    w, _ = calib.image_size
    cx = calib.principal_point[0]
    half = far * max(abs(cx), abs(w - cx)) / calib.focal_px + step
    m = np.arange(-math.ceil(half / step), math.ceil(half / step) + 1)
    n = np.arange(max(0, math.floor(near / step)), math.floor(far / step) + 1)
    nn, mm = np.meshgrid(n, m, indexing="ij")
    pts = np.stack([mm.ravel() * step, np.full(mm.size, float(ground_y)), nn.ravel() * step], axis=1)
    return pts[frustum_mask(calib, pts, depth_range)]


def generate_anchor_pool(
    calib: StereoCalibration,
    grid_interval_m: float = 0.25,
    depth_range=DEFAULT_DEPTH_RANGE,
    ground_y: float = 1.65,
    priors=(),
    grid: FrontViewGrid | None = None,
    stride: int = 16,
) -> AnchorPool:
    """Two anchors (yaw 0 and pi/2) per prior at every lattice point in view.

    Each anchor is tagged with the front-view cell containing the projection
    of its geometric center; anchors whose center projects outside the image
    are dropped.
    """
    priors = list(priors)
    if grid is None:
        grid = FrontViewGrid.from_image(calib.image_size, stride)
    pts = lattice_points(calib, grid_interval_m, depth_range, ground_y)
    if len(pts) == 0 or not priors:
        return AnchorPool(np.zeros((0, 7)), np.zeros(0), np.zeros((0, 2)))
    sizes = np.array([p.mean_size for p in priors])
    n_pts, n_pri, n_yaw = len(pts), len(priors), len(ANCHOR_YAWS)
    boxes = np.empty((n_pts, n_pri, n_yaw, 7))
    boxes[..., 0:3] = pts[:, None, None, :]
    boxes[..., 3:6] = sizes[None, :, None, :]
    boxes[..., 6] = np.asarray(ANCHOR_YAWS)[None, None, :]
    prior_index = np.broadcast_to(np.arange(n_pri)[None, :, None], (n_pts, n_pri, n_yaw))
    boxes = boxes.reshape(-1, 7)
    prior_index = prior_index.reshape(-1)
    uv, ok = projected_centers(calib, boxes)
    w, h = calib.image_size
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    return AnchorPool(boxes[ok], prior_index[ok], grid.cell_of(uv[ok]))


def select_potential_anchors(pool: AnchorPool, objectness_map, threshold: float) -> AnchorPool:
    """Anchors whose tagged cell has foreground probability >= ``threshold``."""
    m = np.asarray(objectness_map, dtype=np.float64)
    if len(pool) and (pool.cells.max(axis=0) >= m.shape).any():
        raise ValueError(f"objectness map {m.shape} does not cover the anchor grid")
    keep = m[pool.cells[:, 0], pool.cells[:, 1]] >= threshold if len(pool) else np.zeros(0, bool)
    return pool.subset(keep)


# ---------------------------------------------------------------------------
# offsets


def encode_boxes(anchors, gts) -> np.ndarray:
    """(N, 8) regression targets ``[dC(3), dS(3), cos, sin]`` of gts w.r.t. anchors.

    Center offsets are divided by the anchor BEV diagonal, sizes are log
    ratios and the orientation is expressed in the anchor's local frame.
    """
    a, g = as_box_array(anchors), as_box_array(gts)
    diag = np.hypot(a[:, 4], a[:, 5])[:, None]
    local = g[:, 6] - a[:, 6]
    return np.concatenate(
        [(g[:, 0:3] - a[:, 0:3]) / diag, np.log(g[:, 3:6] / a[:, 3:6]), np.cos(local)[:, None], np.sin(local)[:, None]],
        axis=1,
    )


def decode_boxes(anchors, deltas) -> np.ndarray:
    a = as_box_array(anchors)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 8)
    diag = np.hypot(a[:, 4], a[:, 5])[:, None]
    out = np.empty_like(a)
    out[:, 0:3] = a[:, 0:3] + d[:, 0:3] * diag
    out[:, 3:6] = a[:, 3:6] * np.exp(d[:, 3:6])
    out[:, 6] = normalize_angle(np.arctan2(d[:, 7], d[:, 6]) + a[:, 6])
    return out


def encode_offsets(anchor: OrientedBox3D, gt: OrientedBox3D) -> OffsetTarget:
    return OffsetTarget.from_array(encode_boxes(anchor, gt)[0])


def decode_offsets(anchor: OrientedBox3D, t: OffsetTarget) -> OrientedBox3D:
    return OrientedBox3D.from_array(decode_boxes(anchor, t.to_array())[0])
