"""KITTI-format labels, difficulty regimes, frames and dataset directories.

Directory layout (images are binary PPM rather than PNG)::

    root/image_2/<id>.ppm   left
    root/image_3/<id>.ppm   right (stereo datasets)
    root/calib/<id>.txt
    root/label_2/<id>.txt
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..box3d import OrientedBox3D
from ..errors import FieldCount, IdMismatch, MissingFile, NonNumeric
from ..geometry import StereoCalibration, parse_calibration, serialize_calibration

DONT_CARE = "DontCare"
KITTI_IMAGE_HEIGHT = 375
REGIMES = ("easy", "moderate", "hard")
# KITTI devkit cutoffs, per regime
MIN_HEIGHT_PX = (40.0, 25.0, 25.0)
MAX_OCCLUSION = (0, 1, 2)
MAX_TRUNCATION = (0.15, 0.30, 0.50)


@dataclass(frozen=True)
class GroundTruthLabel:
    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple[float, float, float, float]
    size: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]
    rotation_y: float
    score: float | None = None

    def __post_init__(self):
        if self.class_name == DONT_CARE:
            return
        if not all(v > 0 for v in self.size):
            raise ValueError(f"label size must be positive, got {self.size}")
        if not -math.pi - 1e-9 <= self.rotation_y <= math.pi + 1e-9:
            raise ValueError(f"rotation_y {self.rotation_y} outside [-pi, pi]")

    @property
    def excluded_from_training(self) -> bool:
        return self.class_name == DONT_CARE

    @property
    def box(self) -> OrientedBox3D:
        return OrientedBox3D(self.location, self.size, self.rotation_y)

    @property
    def bbox_height(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]


def parse_label_line(text: str) -> GroundTruthLabel:
    parts = text.split()
    if len(parts) not in (15, 16):
        raise FieldCount(f"KITTI label needs 15 or 16 fields, got {len(parts)}")
    try:
        v = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise NonNumeric(str(exc)) from None
    return GroundTruthLabel(
        class_name=parts[0],
        truncation=v[0],
        occlusion=int(v[1]),
        alpha=v[2],
        bbox2d=tuple(v[3:7]),
        size=tuple(v[7:10]),
        location=tuple(v[10:13]),
        rotation_y=v[13],
        score=v[14] if len(v) == 15 else None,
    )


def serialize_label(label: GroundTruthLabel) -> str:
    vals = [label.truncation, label.occlusion, label.alpha, *label.bbox2d, *label.size, *label.location, label.rotation_y]
    text = "%s %.2f %d %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f" % (label.class_name, *vals)
    if label.score is not None:
        text += " %.6f" % label.score
    return text


def parse_label_file(text: str) -> list[GroundTruthLabel]:
    return [parse_label_line(line) for line in text.splitlines() if line.strip()]


def format_label_file(labels) -> str:
    return "".join(serialize_label(lab) + "\n" for lab in labels)


def kitti_round(x: float, digits: int = 2) -> float:
    """The float a KITTI text field written with ``digits`` decimals parses back to."""
    return float(f"{x:.{digits}f}")


def difficulty_of(label: GroundTruthLabel, image_height: int = KITTI_IMAGE_HEIGHT) -> str:
    """Easiest KITTI regime the label qualifies for, or ``"excluded"``.

    Pixel-height cutoffs are defined at KITTI's 375-pixel image height and
    scale linearly with ``image_height``.
    """
    if label.class_name == DONT_CARE:
        return "excluded"
    scale = image_height / KITTI_IMAGE_HEIGHT
    h = label.bbox_height
    for name, mh, mo, mt in zip(REGIMES, MIN_HEIGHT_PX, MAX_OCCLUSION, MAX_TRUNCATION):
        if h >= mh * scale and label.occlusion <= mo and label.truncation <= mt:
            return name
    return "excluded"


# ---------------------------------------------------------------------------
# frames


@dataclass
class FrameData:
    id: str
    left_image: np.ndarray  # (1, 3, H, W) in [0, 1]
    calib: StereoCalibration
    labels: list = field(default_factory=list)
    right_image: np.ndarray | None = None

    def __post_init__(self):
        w, h = self.calib.image_size
        for img in (self.left_image, self.right_image):
            if img is not None and img.shape != (1, 3, h, w):
                raise ValueError(f"image shape {img.shape} does not match calibration size {(w, h)}")

    @property
    def is_stereo(self) -> bool:
        return self.right_image is not None

    def boxes(self, class_name=None) -> list[OrientedBox3D]:
        return [
            lab.box
            for lab in self.labels
            if not lab.excluded_from_training and (class_name is None or lab.class_name == class_name)
        ]


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bilinear resampling weights, pixel-center aligned."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - t)
    np.add.at(m, (np.arange(n_out), i1), t)
    return m


def resize_image(img: np.ndarray, out_hw) -> np.ndarray:
    h, w = img.shape[-2:]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return img.copy()
    return resize_matrix(h, oh) @ img @ resize_matrix(w, ow).T


def resize_frame(frame: FrameData, target=(384, 1248)) -> FrameData:
    """Resize both views to ``target`` (height, width) and rescale the calibration."""
    th, tw = target
    w, h = frame.calib.image_size
    if (h, w) == (th, tw):
        return replace(frame)
    calib = frame.calib.scaled(tw / w, th / h, (tw, th))
    return replace(
        frame,
        left_image=resize_image(frame.left_image, target),
        right_image=None if frame.right_image is None else resize_image(frame.right_image, target),
        calib=calib,
    )


# ---------------------------------------------------------------------------
# image files


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (1, 3, H, W) or (3, H, W) [0, 1] image as 8-bit binary PPM."""
    img = np.asarray(image).reshape(-1, *image.shape[-2:])
    if img.shape[0] != 3:
        raise ValueError("PPM images need three channels")
    h, w = img.shape[1:]
    raw = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(raw.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read an 8-bit binary PPM into a (1, 3, H, W) float image in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6, maxval 255) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    raw = np.frombuffer(data[pos : pos + 3 * w * h], dtype=np.uint8)
    if raw.size != 3 * w * h:
        raise ValueError(f"{path}: truncated image data")
    return (raw.reshape(h, w, 3).transpose(2, 0, 1)[None] / 255.0).astype(np.float64)


# ---------------------------------------------------------------------------
# directories


class KittiDataset:
    """Reader/writer for a KITTI-layout directory.

    Frames stream in lexicographic id order. ``ids`` (or a split file with one
    id per line) restricts the set.
    """

    LEFT, RIGHT, CALIB, LABEL = "image_2", "image_3", "calib", "label_2"

    def __init__(self, root, stereo: bool = True, ids=None, split_file=None, require_labels: bool = True):
        self.root = Path(root)
        self.stereo = stereo
        self.require_labels = require_labels
        if split_file is not None:
            ids = [line.strip() for line in Path(split_file).read_text().splitlines() if line.strip()]
        self._ids = None if ids is None else sorted(ids)

    def _path(self, sub, frame_id, ext):
        return self.root / sub / f"{frame_id}{ext}"

    def ids(self) -> list[str]:
        if self._ids is not None:
            return list(self._ids)
        left = self.root / self.LEFT
        if not left.is_dir():
            raise MissingFile(f"{left} does not exist")
        found = sorted(p.stem for p in left.glob("*.ppm"))
        others = [(self.CALIB, ".txt")]
        if self.require_labels:
            others.append((self.LABEL, ".txt"))
        if self.stereo:
            others.append((self.RIGHT, ".ppm"))
        for sub, ext in others:
            d = self.root / sub
            if not d.is_dir():
                raise MissingFile(f"{d} does not exist")
            have = sorted(p.stem for p in d.glob(f"*{ext}"))
            if have != found:
                diff = sorted(set(have) ^ set(found))
                raise IdMismatch(f"{sub} ids differ from {self.LEFT}: {diff[:5]}")
        return found

    def __len__(self):
        return len(self.ids())

    def __iter__(self):
        return (self.read(i) for i in self.ids())

    def read(self, frame_id: str) -> FrameData:
        def need(p):
            if not p.exists():
                raise MissingFile(f"missing {p}")
            return p

        left = read_ppm(need(self._path(self.LEFT, frame_id, ".ppm")))
        right = read_ppm(need(self._path(self.RIGHT, frame_id, ".ppm"))) if self.stereo else None
        h, w = left.shape[-2:]
        calib = parse_calibration(need(self._path(self.CALIB, frame_id, ".txt")).read_text(), image_size=(w, h))
        label_path = self._path(self.LABEL, frame_id, ".txt")
        if self.require_labels:
            labels = parse_label_file(need(label_path).read_text())
        else:
            labels = parse_label_file(label_path.read_text()) if label_path.exists() else []
        return FrameData(frame_id, left, calib, labels, right)

    def write(self, frame: FrameData) -> None:
        for sub in (self.LEFT, self.CALIB, self.LABEL) + ((self.RIGHT,) if frame.right_image is not None else ()):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        write_ppm(self._path(self.LEFT, frame.id, ".ppm"), frame.left_image)
        if frame.right_image is not None:
            write_ppm(self._path(self.RIGHT, frame.id, ".ppm"), frame.right_image)
        self._path(self.CALIB, frame.id, ".txt").write_text(serialize_calibration(frame.calib))
        self._path(self.LABEL, frame.id, ".txt").write_text(format_label_file(frame.labels))


def read_label_dir(path) -> dict[str, list[GroundTruthLabel]]:
    """All ``<id>.txt`` label files under ``path`` keyed by id."""
    path = Path(path)
    if not path.is_dir():
        raise MissingFile(f"{path} does not exist")
    return {p.stem: parse_label_file(p.read_text()) for p in sorted(path.glob("*.txt"))}


def write_label_dir(path, labels_by_id: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for frame_id, labels in labels_by_id.items():
        (path / f"{frame_id}.txt").write_text(format_label_file(labels))
