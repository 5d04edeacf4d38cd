"""Synthetic calibrated stereo scenes with exact 3D ground truth.

Objects are textured, flat-shaded cuboids resting on a ground plane. Both
views are rendered from the same 3D scene, so surface texture is fixed to
the object and stereo correspondence is geometric. The background depends
only on the image row, which keeps an empty scene identical in both views.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..box3d import as_box_array, bev_intersection_pairs, corners_array, normalize_angle, project_boxes
from ..errors import PlacementFailure
from ..geometry import StereoCalibration, frustum_mask, project_points
from .kitti import FrameData, GroundTruthLabel, kitti_round

HIDDEN_LEVELS = (0.3, 0.7)  # hidden-fraction cutoffs for occlusion 1 / 2


@dataclass
class SceneSpec:
    seed: int = 0
    object_count: tuple[int, int] = (1, 4)
    class_name: str = "Car"
    base_size: tuple[float, float, float] = (1.52, 1.63, 3.88)
    size_jitter: float = 0.05
    scale_jitter: float = 0.0
    yaw_range: tuple[float, float] = (-math.pi, math.pi)
    placement_x: tuple[float, float] = (-12.0, 12.0)
    placement_z: tuple[float, float] = (6.0, 35.0)
    ground_y: float = 1.65
    ground_jitter: float = 0.0
    focal_px: float = 240.0
    baseline_m: float = 0.54
    image_size: tuple[int, int] = (416, 128)
    principal_point: tuple[float, float] | None = None
    depth_range: tuple[float, float] = (0.5, 70.0)
    light_dir: tuple[float, float, float] = (-0.4, -1.0, -0.5)  # towards the light
    ambient: float = 0.35
    texture_cell_m: float = 0.15
    texture_strength: float = 0.5
    supersample: int = 2
    min_gap_m: float = 0.3
    max_attempts: int = 500
    stereo: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        lo, hi = self.object_count
        if not 0 <= lo <= hi:
            raise ValueError("object_count must satisfy 0 <= min <= max")
        near, far = self.depth_range
        if not (near < self.placement_z[0] <= self.placement_z[1] <= far):
            raise ValueError("placement_z must lie inside depth_range")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown scene keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def calibration(self) -> StereoCalibration:
        w, h = self.image_size
        pp = self.principal_point or (w / 2.0, 0.4 * h)
        return StereoCalibration.from_rig(self.focal_px, pp, self.baseline_m, (w, h))


# ---------------------------------------------------------------------------
# placement


def _sample_objects(spec: SceneSpec, calib: StereoCalibration, rng: np.random.Generator, ground_y: float):
    n = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    boxes: list[np.ndarray] = []
    attempts = 0
    while len(boxes) < n:
        attempts += 1
        if attempts > spec.max_attempts:
            raise PlacementFailure(f"placed {len(boxes)} of {n} objects after {spec.max_attempts} attempts")
        scale = 1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter)
        size = np.asarray(spec.base_size) * scale * (1.0 + rng.uniform(-spec.size_jitter, spec.size_jitter, 3))
        x = rng.uniform(*spec.placement_x)
        z = rng.uniform(*spec.placement_z)
        yaw = rng.uniform(*spec.yaw_range)
        box = np.array(
            [
                kitti_round(x),
                kitti_round(ground_y),
                kitti_round(z),
                *(kitti_round(s) for s in size),
                kitti_round(float(normalize_angle(yaw))),
            ]
        )
        box[6] = normalize_angle(box[6])
        if not frustum_mask(calib, box[None, :3], spec.depth_range)[0]:
            continue
        if boxes:
            grown = box.copy()
            grown[4:6] += spec.min_gap_m
            others = np.stack(boxes)
            if (bev_intersection_pairs(np.repeat(grown[None], len(others), 0), others) > 0).any():
                continue
        boxes.append(box)
    return as_box_array(boxes) if boxes else np.zeros((0, 7))


# ---------------------------------------------------------------------------
# rendering


def _hash01(*keys) -> np.ndarray:
    """Deterministic integer hash of broadcast integer arrays to [0, 1)."""
    with np.errstate(over="ignore"):
        h = np.uint64(0x9E3779B97F4A7C15)
        for k in keys:
            k = np.asarray(k).astype(np.int64).astype(np.uint64)
            h = (h ^ k) * np.uint64(0xBF58476D1CE4E5B9)
            h = h ^ (h >> np.uint64(31))
        h = (h ^ (h >> np.uint64(29))) * np.uint64(0x94D049BB133111EB)
        h = h ^ (h >> np.uint64(32))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(a, b, cell, uid, face) -> np.ndarray:
    fa, fb = a / cell, b / cell
    ia, ib = np.floor(fa), np.floor(fb)
    ta, tb = fa - ia, fb - ib
    ta, tb = ta * ta * (3 - 2 * ta), tb * tb * (3 - 2 * tb)
    ia, ib = ia.astype(np.int64), ib.astype(np.int64)

    def corner(da, db):
        return _hash01(uid, face, ia + da, ib + db)

    top = corner(0, 0) * (1 - ta) + corner(1, 0) * ta
    bot = corner(0, 1) * (1 - ta) + corner(1, 1) * ta
    return top * (1 - tb) + bot * tb


def _background(v: np.ndarray, horizon: float, height: float) -> np.ndarray:
    """(len(v), 3) colors as a function of image row only."""
    v = np.asarray(v, dtype=np.float64)
    sky_t = np.clip(v / max(horizon, 1.0), 0, 1)[:, None]
    gnd_t = np.clip((v - horizon) / max(height - horizon, 1.0), 0, 1)[:, None]
    sky = (1 - sky_t) * [0.55, 0.70, 0.90] + sky_t * [0.80, 0.85, 0.90]
    gnd = (1 - gnd_t) * [0.42, 0.40, 0.38] + gnd_t * [0.30, 0.29, 0.27]
    return np.where((v < horizon)[:, None], sky, gnd)


def _box_axes(box):
    c, s = math.cos(box[6]), math.sin(box[6])
    ex = np.array([c, 0.0, -s])  # along length
    ey = np.array([0.0, 1.0, 0.0])  # down
    ez = np.array([s, 0.0, c])  # along width
    return ex, ey, ez


def render_view(p, image_size, boxes, albedos, uids, spec: SceneSpec, horizon: float):
    """Render one view. Returns the image (3, H, W), per-object silhouette
    and visible fine-pixel counts."""
    s = int(spec.supersample)
    w, h = image_size
    fw, fh = w * s, h * s
    pf = np.diag([s, s, 1.0]) @ np.asarray(p, dtype=np.float64)
    m_inv = np.linalg.inv(pf[:, :3])
    cam = -m_inv @ pf[:, 3]
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)

    rows = (np.arange(fh) + 0.5) / s
    img = np.repeat(_background(rows, horizon, h)[:, None, :], fw, axis=1)
    depth = np.full((fh, fw), np.inf)
    owner = np.full((fh, fw), -1, dtype=np.int64)
    silhouette = np.zeros(len(boxes), dtype=np.int64)

    for k, box in enumerate(boxes):
        ex, ey, ez = _box_axes(box)
        base = box[:3]
        hh, ww, ll = box[3:6]
        mask_obj = np.zeros((fh, fw), dtype=bool)
        # (normal, plane offset vector, in-plane axes and half-ranges)
        faces = [
            (ex, ll / 2 * ex, (ez, ww / 2, 0.0), (ey, hh / 2, -hh / 2)),
            (-ex, -ll / 2 * ex, (ez, ww / 2, 0.0), (ey, hh / 2, -hh / 2)),
            (ez, ww / 2 * ez, (ex, ll / 2, 0.0), (ey, hh / 2, -hh / 2)),
            (-ez, -ww / 2 * ez, (ex, ll / 2, 0.0), (ey, hh / 2, -hh / 2)),
            (-ey, -hh * ey, (ex, ll / 2, 0.0), (ez, ww / 2, 0.0)),
            (ey, 0.0 * ey, (ex, ll / 2, 0.0), (ez, ww / 2, 0.0)),
        ]
        for fi, (n, off, (ax1, r1, c1), (ax2, r2, c2)) in enumerate(faces):
            center = base + off + c1 * ax1 + c2 * ax2
            if float(n @ (cam - center)) <= 0:
                continue
            quad = np.array(
                [center + sa * r1 * ax1 + sb * r2 * ax2 for sa, sb in ((1, 1), (-1, 1), (-1, -1), (1, -1))]
            )
            if (quad[:, 2] <= 0.05).any():
                continue
            hom = quad @ pf[:, :3].T + pf[:, 3]
            uv = hom[:, :2] / hom[:, 2:3]
            u0 = max(int(np.floor(uv[:, 0].min())) - 1, 0)
            u1 = min(int(np.ceil(uv[:, 0].max())) + 1, fw)
            v0 = max(int(np.floor(uv[:, 1].min())) - 1, 0)
            v1 = min(int(np.ceil(uv[:, 1].max())) + 1, fh)
            if u0 >= u1 or v0 >= v1:
                continue
            uu, vv = np.meshgrid(np.arange(u0, u1) + 0.5, np.arange(v0, v1) + 0.5)
            rays = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ m_inv.T
            denom = rays @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((center - cam) @ n) / denom
            pts = cam + t[..., None] * rays
            rel = pts - center
            a1 = rel @ ax1
            a2 = rel @ ax2
            inside = (np.abs(a1) <= r1 + 1e-9) & (np.abs(a2) <= r2 + 1e-9) & (t > 0) & np.isfinite(t)
            if not inside.any():
                continue
            mask_obj[v0:v1, u0:u1] |= inside
            zwin = depth[v0:v1, u0:u1]
            win = inside & (t < zwin)
            if not win.any():
                continue
            tex = _value_noise(a1 + r1, a2 + r2, spec.texture_cell_m, uids[k], fi)
            shade = spec.ambient + (1 - spec.ambient) * max(0.0, float(n @ light))
            color = albedos[k][None, None, :] * shade * ((1 - spec.texture_strength) + spec.texture_strength * tex)[..., None]
            sub_img = img[v0:v1, u0:u1]
            sub_img[win] = color[win]
            zwin[win] = t[win]
            owner[v0:v1, u0:u1][win] = k
        silhouette[k] = mask_obj.sum()
    visible = np.bincount(owner[owner >= 0], minlength=len(boxes)) if len(boxes) else np.zeros(0, np.int64)
    img = img.reshape(h, s, w, s, 3).mean(axis=(1, 3)).transpose(2, 0, 1)
    return img, silhouette, visible


def _occlusion_level(hidden: float) -> int:
    if hidden <= 0.0:
        return 0
    if hidden < HIDDEN_LEVELS[0]:
        return 1
    if hidden < HIDDEN_LEVELS[1]:
        return 2
    return 3


def _labels_for(boxes, calib: StereoCalibration, silhouette, visible, class_name):
    labels = []
    clipped = project_boxes(calib.p_left, boxes, calib.image_size)
    uv = project_points(calib.p_left, corners_array(boxes))
    raw = np.stack([uv[..., 0].min(1), uv[..., 1].min(1), uv[..., 0].max(1), uv[..., 1].max(1)], axis=1)
    for k, box in enumerate(boxes):
        full = (raw[k, 2] - raw[k, 0]) * (raw[k, 3] - raw[k, 1])
        inside = (clipped[k, 2] - clipped[k, 0]) * (clipped[k, 3] - clipped[k, 1])
        trunc = float(np.clip(1.0 - inside / full, 0.0, 1.0)) if full > 0 else 1.0
        hidden = 1.0 - visible[k] / silhouette[k] if silhouette[k] > 0 else 1.0
        x, _, z = box[:3]
        alpha = float(normalize_angle(box[6] - math.atan2(x, z)))
        labels.append(
            GroundTruthLabel(
                class_name=class_name,
                truncation=kitti_round(trunc),
                occlusion=_occlusion_level(hidden),
                alpha=kitti_round(alpha),
                bbox2d=tuple(kitti_round(float(v)) for v in clipped[k]),
                size=tuple(float(v) for v in box[3:6]),
                location=tuple(float(v) for v in box[0:3]),
                rotation_y=float(box[6]),
            )
        )
    return labels


def generate_scene(spec: SceneSpec, index: int = 0) -> FrameData:
    """Render frame ``index`` of the dataset described by ``spec``.

    The frame's randomness is seeded by ``(spec.seed, index)`` alone, so
    frames can be generated independently and in any order.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(index)]))
    calib = spec.calibration()
    ground_y = spec.ground_y + rng.uniform(-spec.ground_jitter, spec.ground_jitter)
    boxes = _sample_objects(spec, calib, rng, ground_y)
    albedos = rng.uniform(0.25, 0.95, size=(len(boxes), 3))
    uids = rng.integers(0, 2**31, size=len(boxes))
    # painter's order (far to near); the depth test settles touching faces
    order = np.argsort(-np.hypot(boxes[:, 0], boxes[:, 2]), kind="stable") if len(boxes) else np.zeros(0, int)
    boxes, albedos, uids = boxes[order], albedos[order], uids[order]
    horizon = calib.principal_point[1]
    left, sil, vis = render_view(calib.p_left, calib.image_size, boxes, albedos, uids, spec, horizon)
    right = None
    if spec.stereo:
        right, _, _ = render_view(calib.p_right, calib.image_size, boxes, albedos, uids, spec, horizon)
        right = np.round(right * 255.0)[None] / 255.0
    left = np.round(left * 255.0)[None] / 255.0
    labels = _labels_for(boxes, calib, sil, vis, spec.class_name)
    return FrameData(f"{index:06d}", left, calib, labels, right)


def generate_dataset(spec: SceneSpec, count: int, start: int = 0) -> list[FrameData]:
    return [generate_scene(spec, i) for i in range(start, start + count)]
