"""Three-stage detector: front-view objectness, 3D RPN and refinement.

One backbone runs on each view with shared weights. Its last block feeds a
front-view objectness grid; a two-level pyramid (last block upsampled plus a
lateral projection of the block before) feeds both RoI stages. Mono and
stereo models differ only in the block that follows RoIAlign.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import yaml
from sklearn.base import BaseEstimator

from .anchor import (
    AnchorPool,
    AnchorPrior,
    FrontViewGrid,
    compute_prior_sizes,
    decode_boxes,
    encode_boxes,
    frontview_targets,
    generate_anchor_pool,
    select_potential_anchors,
)
from .box3d import OrientedBox3D, as_box_array, iou_3d_matrix, iou_bev_matrix, nms_bev_arrays, normalize_angle, project_boxes
from .dataset.kitti import FrameData, GroundTruthLabel
from .errors import CheckpointShapeMismatch, DatasetEmpty, NoPotentialAnchors, ShapeMismatch
from .geometry import StereoCalibration
from .nn import checkpoint, ops
from .nn.layers import maxpool2d, roi_align, upsample_bilinear
from .nn.losses import one_hot, smooth_l1, softmax_cross_entropy
from .nn.module import Conv2d, Module
from .nn.optim import SGD, Adam
from .nn.tensor import Tensor, no_grad
from .tlnet import FUSION_MODES, FusionHead
from .validation import check_frame

STAGES = ("frontview", "rpn", "refine", "finetune")
MAX_PROPOSALS = 1024
SIZE_DELTA_CLIP = 3.0
INPUT_MEAN = 0.5
LOG_FIELDS = ("iter", "stage", "loss_total", "loss_cls", "loss_reg")

IGNORE, NEGATIVE, POSITIVE = -1, 0, 1


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DetectorConfig:
    """All hyperparameters of a detector run.

    ``priors`` holds ``[class, h, w, l]`` rows; when empty they are computed
    from the training labels at fit time. ``iterations`` gives the length of
    the four stages in order: front view alone, plus RPN, plus refinement
    (all Adam), then an SGD finish over all three.
    """

    mode: str = "stereo"
    fusion: str = "reweight"
    classes: tuple = ("Car",)
    priors: tuple = ()
    grid_interval_m: float = 0.5
    depth_range: tuple = (5.0, 40.0)
    ground_y: float = 1.65
    widths: tuple = (16, 32, 64, 64)
    rpn_channels: int = 4
    roi_size: int = 7
    hidden: int = 256
    detach_scores: bool = False
    iterations: tuple = (200, 400, 600, 200)
    learning_rate: float = 1e-4
    finetune_learning_rate: float = 1e-4
    l2_decay: float = 5e-3
    lambda_reg: float = 1.0
    reg_beta: float = 1.0 / 9.0
    freeze_frontview: bool = False
    frontview_threshold: float = 0.3
    rpn_positive_iou: float = 0.5
    rpn_negative_iou: float = 0.35
    rpn_train_anchors: str = "potential"
    refine_iou: str = "3d"
    refine_positive_iou: float = 0.5
    refine_negative_iou: float = 0.35
    rpn_batch: int = 256
    refine_batch: int = 64
    positive_fraction: float = 0.5
    refine_jitter: int = 8
    jitter_center_m: float = 0.5
    jitter_height_m: float = 0.2
    jitter_yaw: float = 0.3
    pre_nms_top_n: int = 4096
    train_pre_nms_top_n: int = 512
    train_top_k: int = 128
    rpn_nms: float = 0.8
    top_k: int = 1024
    final_nms: float = 0.1
    score_threshold: float = 0.05
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("classes", "depth_range", "widths", "iterations"):
            setattr(self, name, tuple(getattr(self, name)))
        self.priors = tuple((str(r[0]), *(float(v) for v in r[1:4])) for r in self.priors)
        if self.mode not in ("mono", "stereo"):
            raise ValueError(f"mode must be 'mono' or 'stereo', got {self.mode!r}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if not self.classes:
            raise ValueError("at least one class is required")
        for name in ("top_k", "train_top_k"):
            if not 0 < getattr(self, name) <= MAX_PROPOSALS:
                raise ValueError(f"{name} must lie in [1, {MAX_PROPOSALS}], got {getattr(self, name)}")
        if len(self.iterations) != len(STAGES) or any(int(n) < 0 for n in self.iterations):
            raise ValueError(f"iterations needs {len(STAGES)} non-negative counts, got {self.iterations}")
        if len(self.widths) < 2:
            raise ValueError("the backbone needs at least two blocks")
        for stage in ("rpn", "refine"):
            if not 0 <= getattr(self, f"{stage}_negative_iou") <= getattr(self, f"{stage}_positive_iou") <= 1:
                raise ValueError(f"need 0 <= {stage}_negative_iou <= {stage}_positive_iou <= 1")
        if self.rpn_train_anchors not in ("potential", "pool"):
            raise ValueError(f"rpn_train_anchors must be 'potential' or 'pool', got {self.rpn_train_anchors!r}")
        if self.refine_iou not in ("bev", "3d"):
            raise ValueError(f"refine_iou must be 'bev' or '3d', got {self.refine_iou!r}")
        for name in ("rpn_nms", "final_nms", "score_threshold", "frontview_threshold", "positive_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.priors:
            missing = set(self.classes) - {r[0] for r in self.priors}
            if missing:
                raise ValueError(f"no prior size for classes {sorted(missing)}")

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)

    @property
    def head_mode(self) -> str:
        return "mono" if self.mode == "mono" else self.fusion

    def prior_list(self) -> list[AnchorPrior]:
        by_name = {r[0]: AnchorPrior(r[0], r[1:4]) for r in self.priors}
        return [by_name[c] for c in self.classes]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: [list(v) for v in d[k]] if k == "priors" else (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "DetectorConfig":
        d = yaml.safe_load(text) or {}
        if not isinstance(d, dict):
            raise ValueError("config file must hold a mapping")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "DetectorConfig":
        return cls.from_yaml(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    def replace(self, **changes) -> "DetectorConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Detection:
    box: OrientedBox3D
    score: float
    class_name: str = "Car"

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


def detection_to_label(det: Detection, calib: StereoCalibration) -> GroundTruthLabel:
    """KITTI label line for a detection (truncation/occlusion written as -1)."""
    b = det.box
    bbox = project_boxes(calib.p_left, b, calib.image_size)[0]
    if np.isnan(bbox).any():
        bbox = np.zeros(4)
    x, _, z = b.center
    return GroundTruthLabel(
        class_name=det.class_name,
        truncation=-1.0,
        occlusion=-1,
        alpha=float(normalize_angle(b.yaw - math.atan2(x, z))),
        bbox2d=tuple(float(v) for v in bbox),
        size=tuple(float(v) for v in b.size),
        location=tuple(float(v) for v in b.center),
        rotation_y=float(b.yaw),
        score=float(det.score),
    )


def label_to_detection(label: GroundTruthLabel) -> Detection:
    score = 1.0 if label.score is None else min(max(label.score, 0.0), 1.0)
    return Detection(label.box, score, label.class_name)


# ---------------------------------------------------------------------------
# network


class Backbone(Module):
    """Blocks of 3x3 conv, ReLU and 2x2 max pooling."""

    def __init__(self, widths, rng):
        chans = (3, *widths)
        self.n_blocks = len(widths)
        for i in range(self.n_blocks):
            setattr(self, f"conv{i + 1}", Conv2d(chans[i], chans[i + 1], 3, rng=rng))

    def __call__(self, x) -> list[Tensor]:
        feats = []
        for i in range(self.n_blocks):
            x = maxpool2d(ops.relu(getattr(self, f"conv{i + 1}")(x)))
            feats.append(x)
        return feats


class TLNetModel(Module):
    def __init__(self, config: DetectorConfig, seed: int | None = None):
        rng = np.random.default_rng(config.seed if seed is None else seed)
        w = config.widths
        roi = (config.roi_size, config.roi_size)
        self.backbone = Backbone(w, rng)
        self.frontview = Conv2d(w[-1], 2, 1, rng=rng)
        self.lateral = Conv2d(w[-2], w[-1], 1, rng=rng)
        self.rpn_reduce = Conv2d(w[-1], config.rpn_channels, 1, rng=rng)
        mode = config.head_mode
        self.rpn = FusionHead(mode, config.rpn_channels, roi, 2, config.hidden, config.detach_scores, rng)
        self.refine = FusionHead(mode, w[-1], roi, len(config.classes) + 1, config.hidden, config.detach_scores, rng)

    def stage_parameters(self, stage: int, freeze_frontview: bool = False) -> dict:
        prefixes = ["backbone.", "frontview."]
        if stage >= 1:
            prefixes += ["lateral.", "rpn_reduce.", "rpn."]
            if freeze_frontview:
                prefixes.remove("frontview.")
        if stage >= 2:
            prefixes.append("refine.")
        return {k: p for k, p in self.parameters().items() if k.startswith(tuple(prefixes))}


class FrameFeatures(NamedTuple):
    frontview: Tensor  # (1, 2, g_y, g_x) left-view logits
    rpn: tuple  # per view (1, rpn_channels, h, w)
    refine: tuple  # per view (1, C, h, w)
    feature_stride: int


def extract_features(model: TLNetModel, frame: FrameData, config: DetectorConfig) -> FrameFeatures:
    stereo = config.mode == "stereo"
    check_frame(frame, stereo=stereo)
    h, w = frame.left_image.shape[-2:]
    s = config.stride
    if h % s or w % s:
        raise ShapeMismatch(f"image size {w}x{h} must be divisible by the backbone stride {s}")
    x = np.concatenate([frame.left_image, frame.right_image]) if stereo else frame.left_image
    feats = model.backbone(Tensor(x - INPUT_MEAN))
    top, mid = feats[-1], feats[-2]
    pyramid = upsample_bilinear(top, 2) + model.lateral(mid)
    reduced = model.rpn_reduce(pyramid)
    fv = model.frontview(ops.index_rows(top, [0]) if stereo else top)
    views = [0, 1] if stereo else [0]
    split = lambda t: tuple(ops.index_rows(t, [v]) if stereo else t for v in views)  # noqa: E731
    return FrameFeatures(fv, split(reduced), split(pyramid), s // 2)


def box_rois(p, boxes, feature_stride: float) -> np.ndarray:
    """Unclipped projected hulls in feature-map coordinates."""
    return project_boxes(p, boxes) / feature_stride


def roi_pair(maps, calib: StereoCalibration, boxes, feature_stride, roi_size):
    """RoIAlign crops of ``boxes`` from each view's map (right is None in mono)."""
    out = (roi_size, roi_size)
    left = roi_align(maps[0], box_rois(calib.p_left, boxes, feature_stride), out)
    right = roi_align(maps[1], box_rois(calib.p_right, boxes, feature_stride), out) if len(maps) > 1 else None
    return left, right


def frontview_probability(features: FrameFeatures) -> np.ndarray:
    return ops.softmax(features.frontview.data[0], axis=0)[1]


_POOL_CACHE: dict = {}


def anchor_pool(calib: StereoCalibration, config: DetectorConfig) -> AnchorPool:
    key = (calib, config.grid_interval_m, config.depth_range, config.ground_y, config.priors, config.classes, config.stride)
    if key not in _POOL_CACHE:
        if len(_POOL_CACHE) > 16:
            _POOL_CACHE.clear()
        _POOL_CACHE[key] = generate_anchor_pool(
            calib, config.grid_interval_m, config.depth_range, config.ground_y, config.prior_list(), stride=config.stride
        )
    return _POOL_CACHE[key]


def _decode(anchors, reg) -> np.ndarray:
    d = np.array(reg, dtype=np.float64)
    d[:, 3:6] = np.clip(d[:, 3:6], -SIZE_DELTA_CLIP, SIZE_DELTA_CLIP)
    return decode_boxes(anchors, d)


# ---------------------------------------------------------------------------
# targets


def assign_rpn_targets(anchors, gts, positive_iou: float = 0.5, negative_iou: float = 0.35, metric: str = "bev"):
    """Label anchors against ground truth by BEV IoU (``metric="3d"`` for 3D IoU).

    Returns ``(labels, offsets, matched)``: labels are 1 (positive), 0
    (negative) or -1 (ignore); ``offsets`` (N, 8) holds regression targets on
    positive rows and zeros elsewhere; ``matched`` is the gt index per anchor
    (-1 when there are no gts). Each gt also makes its best anchor positive
    when that overlap is non-zero.
    """
    a = as_box_array(anchors)
    g = as_box_array(gts)
    n = len(a)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    offsets = np.zeros((n, 8))
    matched = np.full(n, -1, dtype=np.int64)
    if n == 0 or len(g) == 0:
        return labels, offsets, matched
    iou = iou_bev_matrix(a, g) if metric == "bev" else iou_3d_matrix(a, g)
    matched = iou.argmax(axis=1)
    best = iou[np.arange(n), matched]
    labels[best >= negative_iou] = IGNORE
    labels[best >= positive_iou] = POSITIVE
    for j in range(len(g)):
        i = int(iou[:, j].argmax())
        if iou[i, j] > 0:
            labels[i] = POSITIVE
            matched[i] = j
    pos = labels == POSITIVE
    if pos.any():
        offsets[pos] = encode_boxes(a[pos], align_yaw(a[pos], g[matched[pos]]))
    return labels, offsets, matched


def align_yaw(anchors, gts) -> np.ndarray:
    """Copies of ``gts`` flipped by pi where that brings yaw within pi/2 of the anchor's.

    A box and its pi-rotated twin have the same corners, so this changes
    only which orientation vector the regression head is asked for.
    """
    a, g = as_box_array(anchors), as_box_array(gts).copy()
    flip = np.abs(normalize_angle(g[:, 6] - a[:, 6])) > np.pi / 2
    g[flip, 6] = normalize_angle(g[flip, 6] + np.pi)
    return g


def sample_targets(labels, batch: int, positive_fraction: float, rng) -> np.ndarray:
    """Sorted indices of a random positive/negative minibatch (ignores dropped)."""
    pos = np.flatnonzero(labels > 0)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(batch * positive_fraction))
    n_neg = min(len(neg), batch - n_pos)
    pick = np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)])
    return np.sort(pick.astype(np.int64))


def _gt_arrays(frame: FrameData, config: DetectorConfig):
    boxes, cls = [], []
    for lab in frame.labels:
        if not lab.excluded_from_training and lab.class_name in config.classes:
            boxes.append(lab.box.to_array())
            cls.append(config.classes.index(lab.class_name) + 1)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 7), np.asarray(cls, dtype=np.int64)


def _jittered(gts: np.ndarray, count: int, config: DetectorConfig, rng) -> np.ndarray:
    if count == 0 or len(gts) == 0:
        return np.zeros((0, 7))
    out = np.repeat(gts, count, axis=0)
    out[:, [0, 2]] += rng.normal(0.0, config.jitter_center_m, (len(out), 2))
    out[:, 1] += rng.normal(0.0, config.jitter_height_m, len(out))
    out[:, 6] = normalize_angle(out[:, 6] + rng.normal(0.0, config.jitter_yaw, len(out)))
    return out


# ---------------------------------------------------------------------------
# forward passes


class Proposals(NamedTuple):
    boxes: np.ndarray  # (k, 7)
    scores: np.ndarray  # (k,)


def _visible(boxes: np.ndarray, config: DetectorConfig) -> np.ndarray:
    return np.isfinite(boxes).all(axis=1) & (boxes[:, 2] > config.depth_range[0] * 0.5)


def forward_rpn(
    frame: FrameData,
    config: DetectorConfig,
    model: TLNetModel,
    features: FrameFeatures | None = None,
    training: bool = False,
) -> Proposals:
    """Score potential anchors, decode them and keep the NMS top ``K``.

    ``training`` swaps in the smaller train-time candidate limits.
    """
    pre_n = config.train_pre_nms_top_n if training else config.pre_nms_top_n
    top_k = config.train_top_k if training else config.top_k
    with no_grad():
        if features is None:
            features = extract_features(model, frame, config)
        pool = anchor_pool(frame.calib, config)
        pot = select_potential_anchors(pool, frontview_probability(features), config.frontview_threshold)
        if len(pot) == 0:
            raise NoPotentialAnchors(
                f"no anchor passes front-view threshold {config.frontview_threshold}; lower frontview_threshold"
            )
        left, right = roi_pair(features.rpn, frame.calib, pot.boxes, features.feature_stride, config.roi_size)
        logits, reg = model.rpn(left, right)
    scores = ops.softmax(logits.data)[:, 1]
    order = np.lexsort((np.arange(len(scores)), -scores))[:pre_n]
    boxes = _decode(pot.boxes[order], reg.data[order])
    scores = scores[order]
    ok = _visible(boxes, config)
    boxes, scores = boxes[ok], scores[ok]
    keep = nms_bev_arrays(boxes, scores, config.rpn_nms, max_keep=min(top_k, MAX_PROPOSALS))
    return Proposals(boxes[keep], scores[keep])


def forward_refine(
    frame: FrameData, proposals: Proposals, config: DetectorConfig, model: TLNetModel, features: FrameFeatures | None = None
) -> list[Detection]:
    """Classify and regress proposals, then per-class NMS and score threshold."""
    if len(proposals.boxes) == 0:
        return []
    with no_grad():
        if features is None:
            features = extract_features(model, frame, config)
        left, right = roi_pair(features.refine, frame.calib, proposals.boxes, features.feature_stride, config.roi_size)
        logits, reg = model.refine(left, right)
    probs = ops.softmax(logits.data)
    cls = probs[:, 1:].argmax(axis=1) + 1
    scores = probs[np.arange(len(probs)), cls]
    boxes = _decode(proposals.boxes, reg.data)
    ok = _visible(boxes, config) & (scores >= config.score_threshold)
    dets = []
    for c in np.unique(cls[ok]):
        idx = np.flatnonzero(ok & (cls == c))
        keep = nms_bev_arrays(boxes[idx], scores[idx], config.final_nms)
        name = config.classes[c - 1]
        dets += [(float(scores[i]), Detection(OrientedBox3D.from_array(boxes[i]), float(scores[i]), name)) for i in idx[keep]]
    dets.sort(key=lambda t: -t[0])
    return [d for _, d in dets]


# ---------------------------------------------------------------------------
# losses


def total_loss(outputs: dict, targets: dict, lambda_reg: float = 1.0, beta: float = 1.0):
    """Sum of per-stage classification and positive-only regression losses.

    ``outputs["frontview"]`` is (n, 2) logits with ``targets["frontview"]``
    (n,) labels; ``outputs["rpn"]``/``outputs["refine"]`` are
    ``(logits, offsets)`` pairs with targets ``(labels, offset_targets)``
    where labels > 0 mark positives. Returns ``(loss, {"cls", "reg"})``.
    """
    cls_terms, reg_terms = [], []
    if "frontview" in outputs:
        logits = outputs["frontview"]
        cls_terms.append(softmax_cross_entropy(logits, one_hot(targets["frontview"], logits.shape[1])))
    for key in ("rpn", "refine"):
        if key not in outputs:
            continue
        logits, reg = outputs[key]
        labels, offsets = targets[key]
        labels = np.asarray(labels, dtype=np.int64)
        cls_terms.append(softmax_cross_entropy(logits, one_hot(labels, logits.shape[1])))
        pos = np.flatnonzero(labels > 0)
        if len(pos):
            reg_terms.append(smooth_l1(ops.index_rows(reg, pos), np.asarray(offsets)[pos], beta))
    cls = cls_terms[0]
    for t in cls_terms[1:]:
        cls = cls + t
    reg = None
    for t in reg_terms:
        reg = t if reg is None else reg + t
    total = cls if reg is None else cls + reg * lambda_reg
    return total, {"cls": float(cls.data), "reg": 0.0 if reg is None else float(reg.data)}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: TLNetModel
    config: DetectorConfig
    log: list = field(default_factory=list)


def fit_priors(config: DetectorConfig, frames) -> DetectorConfig:
    if config.priors:
        return config
    labels = [lab for f in frames for lab in f.labels]
    priors = compute_prior_sizes(labels, config.classes)
    return config.replace(priors=tuple((p.class_name, *p.mean_size) for p in priors))


class _FrameCache:
    """Per-frame targets that do not change during training."""

    def __init__(self, frame: FrameData, config: DetectorConfig):
        self.gts, self.gt_cls = _gt_arrays(frame, config)
        grid = FrontViewGrid.from_image(frame.calib.image_size, config.stride)
        fv = frontview_targets(self.gts, frame.calib, grid)
        self.frontview = fv.reshape(-1)
        self.pool = anchor_pool(frame.calib, config)
        self.on_gt_cells = fv[self.pool.cells[:, 0], self.pool.cells[:, 1]] == 1 if len(self.pool) else np.zeros(0, bool)
        self.rpn_labels, self.rpn_offsets, _ = assign_rpn_targets(
            self.pool.boxes, self.gts, config.rpn_positive_iou, config.rpn_negative_iou
        )


def _stage_of(it: int, bounds) -> int:
    return int(np.searchsorted(bounds, it, side="right"))


def model_metadata(config: DetectorConfig) -> dict:
    return {"config": config.to_dict(), "config_hash": config.config_hash()}


def train(config: DetectorConfig, frames, out_dir=None, verbose: bool = False) -> TrainResult:
    """Staged training with batch size 1.

    Writes ``loss.csv`` and ``final.tlnt`` (plus ``iter_XXXXXX.tlnt`` every
    ``checkpoint_every`` iterations) to ``out_dir`` when given.
    """
    frames = list(frames)
    if not frames:
        raise DatasetEmpty("training needs at least one frame")
    config = fit_priors(config, frames)
    model = TLNetModel(config)
    caches = [_FrameCache(f, config) for f in frames]
    rng = np.random.default_rng([config.seed, 1])
    bounds = np.cumsum(config.iterations)
    total_iters = int(bounds[-1])
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log, optimizer, current = [], None, -1
    order = np.zeros(0, dtype=np.int64)
    for it in range(total_iters):
        stage = _stage_of(it, bounds)
        if stage != current:
            current = stage
            params = list(model.stage_parameters(min(stage, 2), config.freeze_frontview).values())
            if stage == 3:
                optimizer = SGD(params, config.finetune_learning_rate, config.l2_decay)
            else:
                optimizer = Adam(params, config.learning_rate, config.l2_decay)
        if it % len(frames) == 0:
            order = rng.permutation(len(frames))
        k = int(order[it % len(frames)])
        loss, parts = _train_step(model, frames[k], caches[k], config, min(stage, 2), rng)
        model.zero_grad()
        loss.backward()
        optimizer.step()
        row = (it, STAGES[stage], float(loss.data), parts["cls"], parts["reg"])
        log.append(row)
        if verbose and (it % 50 == 0 or it == total_iters - 1):
            print(f"iter {it:5d} {row[1]:<9s} loss {row[2]:.4f} cls {row[3]:.4f} reg {row[4]:.4f}", flush=True)
        if out is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            checkpoint.save(out / f"iter_{it + 1:06d}.tlnt", _param_arrays(model), model_metadata(config))
    if out is not None:
        write_loss_log(out / "loss.csv", log)
        checkpoint.save(out / "final.tlnt", _param_arrays(model), model_metadata(config))
    return TrainResult(model, config, log)


def _train_step(model, frame, cache: _FrameCache, config: DetectorConfig, stage: int, rng):
    features = extract_features(model, frame, config)
    fv = ops.transpose(ops.reshape(features.frontview, (2, -1)), (1, 0))
    outputs, targets = {}, {}
    if stage == 0 or not config.freeze_frontview:
        outputs["frontview"], targets["frontview"] = fv, cache.frontview
    if stage >= 1:
        cand = np.arange(len(cache.pool))
        if config.rpn_train_anchors == "potential":
            pot = cache.on_gt_cells | (frontview_probability(features)[tuple(cache.pool.cells.T)] >= config.frontview_threshold)
            cand = cand[pot] if pot.any() else cand
        idx = cand[sample_targets(cache.rpn_labels[cand], config.rpn_batch, config.positive_fraction, rng)]
        left, right = roi_pair(features.rpn, frame.calib, cache.pool.boxes[idx], features.feature_stride, config.roi_size)
        outputs["rpn"] = model.rpn(left, right)
        targets["rpn"] = (cache.rpn_labels[idx], cache.rpn_offsets[idx])
    if stage >= 2:
        try:
            props = forward_rpn(frame, config, model, features, training=True).boxes
        except NoPotentialAnchors:
            props = np.zeros((0, 7))
        cand = np.concatenate([props, cache.gts, _jittered(cache.gts, config.refine_jitter, config, rng)])
        labels, offsets, matched = assign_rpn_targets(
            cand, cache.gts, config.refine_positive_iou, config.refine_negative_iou, config.refine_iou
        )
        if len(cache.gts):
            labels = np.where(labels == POSITIVE, cache.gt_cls[matched], labels)
        idx = sample_targets(labels, config.refine_batch, config.positive_fraction, rng)
        if len(idx):
            left, right = roi_pair(features.refine, frame.calib, cand[idx], features.feature_stride, config.roi_size)
            outputs["refine"] = model.refine(left, right)
            targets["refine"] = (labels[idx], offsets[idx])
    return total_loss(outputs, targets, config.lambda_reg, config.reg_beta)


def write_loss_log(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_FIELDS)
        for it, stage, tot, cls, reg in rows:
            w.writerow([it, stage, repr(tot), repr(cls), repr(reg)])


def _param_arrays(model: Module) -> dict:
    return {k: p.data for k, p in model.parameters().items()}


# ---------------------------------------------------------------------------
# inference


def load_model(path_or_blob, config: DetectorConfig | None = None) -> tuple[TLNetModel, DetectorConfig]:
    """Rebuild a model from a checkpoint; ``config`` overrides the stored one.

    Raises CheckpointShapeMismatch when ``config`` describes different heads.
    """
    if isinstance(path_or_blob, (bytes, bytearray)):
        values, meta = checkpoint.loads(bytes(path_or_blob))
    else:
        values, meta = checkpoint.load(path_or_blob)
    stored = DetectorConfig.from_dict(meta["config"]) if "config" in meta else None
    if config is None:
        if stored is None:
            raise CheckpointShapeMismatch("checkpoint carries no config; pass one explicitly")
        config = stored
    elif not config.priors and stored is not None:
        config = config.replace(priors=stored.priors)
    model = TLNetModel(config)
    checkpoint.assign(model.parameters(), values)
    return model, config


def infer(frame: FrameData, config: DetectorConfig | None, model_or_checkpoint) -> list[Detection]:
    """Detections for one frame; pure given (frame, parameters, config)."""
    if isinstance(model_or_checkpoint, TLNetModel):
        model = model_or_checkpoint
    else:
        model, config = load_model(model_or_checkpoint, config)
    with no_grad():
        features = extract_features(model, frame, config)
        try:
            proposals = forward_rpn(frame, config, model, features)
        except NoPotentialAnchors:
            return []
        return forward_refine(frame, proposals, config, model, features)


class TLNetDetector(BaseEstimator):
    """Estimator wrapper: ``fit`` on labelled frames, ``predict`` detections."""

    def __init__(self, config: DetectorConfig | None = None, output_dir=None, verbose: bool = False):
        self.config = config
        self.output_dir = output_dir
        self.verbose = verbose

    def fit(self, frames, y=None):
        result = train(self.config or DetectorConfig(), frames, self.output_dir, self.verbose)
        self.model_, self.config_, self.log_ = result.model, result.config, result.log
        return self

    def predict(self, frames) -> list[list[Detection]]:
        from .validation import check_fitted

        check_fitted(self, "model_")
        return [infer(f, self.config_, self.model_) for f in frames]

    def checkpoint_bytes(self) -> bytes:
        from .validation import check_fitted

        check_fitted(self, "model_")
        return checkpoint.dumps(_param_arrays(self.model_), model_metadata(self.config_))

    def save(self, path) -> None:
        Path(path).write_bytes(self.checkpoint_bytes())

    @classmethod
    def load(cls, path, config: DetectorConfig | None = None) -> "TLNetDetector":
        model, config = load_model(path, config)
        est = cls(config=config)
        est.model_, est.config_, est.log_ = model, config, []
        return est
