"""Average precision under 3D IoU, BEV IoU and center-distance matching.

Ground truth is split into cumulative difficulty regimes: a label counts in
its own regime and every harder one. Labels outside the evaluated regime
(and DontCare regions) neither count as misses nor produce true positives;
detections explained by them are dropped from the ranking.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .box3d import as_box_array, iou_3d_matrix, iou_bev_matrix
from .dataset.kitti import DONT_CARE, KITTI_IMAGE_HEIGHT, REGIMES, difficulty_of, read_label_dir
from .errors import IdMismatch

KINDS = ("iou3d", "ioubev", "distance")
TP, FP, IGNORED = 1, 0, -1
DONT_CARE_IOU = 0.5
REPORT_FIELDS = ("criterion", "threshold", "regime", "ap", "gt_count", "tp", "fp")


@dataclass(frozen=True)
class MatchCriterion:
    kind: str
    threshold: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"criterion kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "distance":
            if not self.threshold > 0:
                raise ValueError("distance threshold must be positive")
        elif not 0 < self.threshold <= 1:
            raise ValueError("IoU threshold must lie in (0, 1]")

    @property
    def name(self) -> str:
        return f"{self.kind}@{self.threshold:g}"


DEFAULT_CRITERIA = tuple(
    MatchCriterion(k, t)
    for k, ts in (("iou3d", (0.3, 0.5, 0.7)), ("ioubev", (0.3, 0.5, 0.7)), ("distance", (2.0, 1.0, 0.5)))
    for t in ts
)


@dataclass
class EvalConfig:
    class_name: str = "Car"
    image_height: int = KITTI_IMAGE_HEIGHT
    interpolation: str = "11point"
    distance_mode: str = "3d"  # or "bev"
    criteria: tuple = DEFAULT_CRITERIA
    regimes: tuple = REGIMES

    def __post_init__(self):
        if self.interpolation not in ("11point", "40point"):
            raise ValueError("interpolation must be '11point' or '40point'")
        if self.distance_mode not in ("3d", "bev"):
            raise ValueError("distance_mode must be '3d' or 'bev'")
        self.criteria = tuple(c if isinstance(c, MatchCriterion) else MatchCriterion(*c) for c in self.criteria)
        unknown = set(self.regimes) - set(REGIMES)
        if unknown:
            raise ValueError(f"unknown regimes {sorted(unknown)}")


# ---------------------------------------------------------------------------
# matching


def _centers(arr: np.ndarray, mode: str) -> np.ndarray:
    c = arr[:, :3].copy()
    c[:, 1] -= arr[:, 3] / 2
    return c[:, [0, 2]] if mode == "bev" else c


def affinity(dets, gts, criterion: MatchCriterion, distance_mode: str = "3d"):
    """(n_det, n_gt) scores where higher is better and a boolean 'meets' mask."""
    d, g = as_box_array(dets), as_box_array(gts)
    if criterion.kind == "iou3d":
        s = iou_3d_matrix(d, g)
        return s, s >= criterion.threshold
    if criterion.kind == "ioubev":
        s = iou_bev_matrix(d, g)
        return s, s >= criterion.threshold
    dist = np.linalg.norm(_centers(d, distance_mode)[:, None] - _centers(g, distance_mode)[None], axis=-1)
    return -dist, dist < criterion.threshold


def iou_2d_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area = lambda r: (r[:, 2] - r[:, 0]) * (r[:, 3] - r[:, 1])  # noqa: E731
    union = area(a)[:, None] + area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def match(dets, gts, criterion: MatchCriterion, gt_valid=None, dont_care=None, distance_mode: str = "3d", scores=None):
    """Per-detection flags for one frame and one class.

    ``dets`` and ``gts`` are box arrays (or box lists); ``scores`` default to
    the order given. ``gt_valid`` marks gts counted in the regime (default
    all). Detections are visited by descending score and take the best
    unmatched valid gt that meets the criterion (tp); otherwise the best
    unmatched excluded gt (ignored); otherwise they are ignored when their
    2D box, passed as ``dont_care[0]`` (n_det, 4), overlaps a region in
    ``dont_care[1]`` (m, 4) at IoU >= 0.5, and fp otherwise.
    Returns flags (1 tp, 0 fp, -1 ignored) in input order.
    """
    d, g = as_box_array(dets), as_box_array(gts)
    n = len(d)
    flags = np.full(n, FP, dtype=np.int64)
    if n == 0:
        return flags
    scores = -np.arange(n, dtype=np.float64) if scores is None else np.asarray(scores, dtype=np.float64)
    valid = np.ones(len(g), dtype=bool) if gt_valid is None else np.asarray(gt_valid, dtype=bool)
    if len(g):
        aff, ok = affinity(d, g, criterion, distance_mode)
    used = np.zeros(len(g), dtype=bool)
    suppress = np.zeros(n, dtype=bool)
    if dont_care is not None and len(dont_care[1]):
        suppress = (iou_2d_matrix(dont_care[0], dont_care[1]) >= DONT_CARE_IOU).any(axis=1)
    for i in np.lexsort((np.arange(n), -scores)):
        hit = None
        if len(g):
            for want in (True, False):
                cand = np.flatnonzero(ok[i] & ~used & (valid == want))
                if len(cand):
                    hit = cand[np.argmax(aff[i, cand])]
                    break
        if hit is not None:
            used[hit] = True
            flags[i] = TP if valid[hit] else IGNORED
        elif suppress[i]:
            flags[i] = IGNORED
    return flags


# ---------------------------------------------------------------------------
# curves


@dataclass
class PRCurve:
    """Precision/recall at each distinct score threshold, highest first.

    ``precision`` is the smoothed (right-to-left running max) value;
    ``tp``/``fp`` are the cumulative counts at each threshold.
    """

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    total_gt: int
    recall: np.ndarray = field(init=False)
    precision: np.ndarray = field(init=False)
    raw_precision: np.ndarray = field(init=False)

    def __post_init__(self):
        n_det = self.tp + self.fp
        self.recall = self.tp / self.total_gt if self.total_gt else np.zeros(len(self.tp))
        self.raw_precision = np.where(n_det > 0, self.tp / np.maximum(n_det, 1), 0.0)
        self.precision = np.maximum.accumulate(self.raw_precision[::-1])[::-1] if len(self.tp) else self.raw_precision

    def __len__(self):
        return len(self.thresholds)


def pr_curve(scores, flags, total_gt: int) -> PRCurve:
    """Sweep thresholds at every distinct score; ignored detections are dropped."""
    if total_gt < 0:
        raise ValueError("total_gt must be non-negative")
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=np.int64)
    keep = flags != IGNORED
    scores, flags = scores[keep], flags[keep]
    empty = np.zeros(0, dtype=np.int64)
    if total_gt == 0 or len(scores) == 0:
        return PRCurve(np.zeros(0), empty, empty, total_gt)
    order = np.argsort(-scores, kind="stable")
    s, f = scores[order], flags[order]
    tp = np.cumsum(f == TP)
    fp = np.cumsum(f == FP)
    last = np.r_[s[1:] != s[:-1], True]
    return PRCurve(s[last], tp[last], fp[last], total_gt)


def average_precision(curve: PRCurve, interpolation: str = "11point") -> float:
    """Mean interpolated precision over 11 recall points {0, .1, .., 1} or 40 points {1/40, .., 1}."""
    if interpolation == "11point":
        points, denom = range(0, 11), 10
    elif interpolation == "40point":
        points, denom = range(1, 41), 40
    else:
        raise ValueError("interpolation must be '11point' or '40point'")
    if curve.total_gt == 0 or len(curve) == 0:
        return 0.0
    total = 0.0
    for k in points:
        # recall >= k/denom, compared exactly in integers
        reach = curve.tp * denom >= k * curve.total_gt
        if reach.any():
            total += float(curve.precision[reach].max())
    return total / len(points)


# ---------------------------------------------------------------------------
# dataset-level evaluation


def _regime_rank(name: str) -> int:
    return REGIMES.index(name) if name in REGIMES else len(REGIMES)


@dataclass
class EvalEntry:
    criterion: MatchCriterion
    regime: str
    ap: float
    gt_count: int
    tp: int
    fp: int
    curve: PRCurve


@dataclass
class EvalReport:
    entries: list
    config: EvalConfig

    def ap(self, kind: str, threshold: float, regime: str) -> float:
        for e in self.entries:
            if e.criterion.kind == kind and np.isclose(e.criterion.threshold, threshold) and e.regime == regime:
                return e.ap
        raise KeyError((kind, threshold, regime))

    def rows(self):
        for e in self.entries:
            yield (e.criterion.kind, e.criterion.threshold, e.regime, e.ap, e.gt_count, e.tp, e.fp)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for kind, thr, regime, ap, n, tp, fp in self.rows():
            w.writerow([kind, repr(float(thr)), regime, repr(float(ap)), n, tp, fp])
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'criterion':<16s}" + "".join(f"{r:>10s}" for r in self.config.regimes)
        lines = [head, "-" * len(head)]
        for c in self.config.criteria:
            vals = [self.ap(c.kind, c.threshold, r) for r in self.config.regimes]
            lines.append(f"{c.name:<16s}" + "".join(f"{100 * v:10.2f}" for v in vals))
        return "\n".join(lines)


def _frame_arrays(labels, config: EvalConfig):
    """Boxes, validity per regime rank, 2D boxes and DontCare regions for one frame."""
    same = [lab for lab in labels if lab.class_name == config.class_name]
    boxes = as_box_array([lab.box for lab in same]) if same else np.zeros((0, 7))
    rank = np.array([_regime_rank(difficulty_of(lab, config.image_height)) for lab in same], dtype=np.int64)
    bbox = np.array([lab.bbox2d for lab in same], dtype=np.float64).reshape(-1, 4)
    dc = np.array([lab.bbox2d for lab in labels if lab.class_name == DONT_CARE], dtype=np.float64).reshape(-1, 4)
    return boxes, rank, bbox, dc


def evaluate_labels(det_by_id: dict, gt_by_id: dict, config: EvalConfig | None = None) -> EvalReport:
    """Evaluate in-memory label dicts keyed by frame id."""
    config = config or EvalConfig()
    if set(det_by_id) != set(gt_by_id):
        diff = sorted(set(det_by_id) ^ set(gt_by_id))
        raise IdMismatch(f"detection and ground-truth frame ids differ: {diff[:5]}")
    frames = []
    for fid in sorted(gt_by_id):
        g_boxes, g_rank, g_bbox, dc = _frame_arrays(gt_by_id[fid], config)
        dets = [d for d in det_by_id[fid] if d.class_name == config.class_name]
        d_boxes = as_box_array([d.box for d in dets]) if dets else np.zeros((0, 7))
        d_scores = np.array([1.0 if d.score is None else d.score for d in dets], dtype=np.float64)
        d_bbox = np.array([d.bbox2d for d in dets], dtype=np.float64).reshape(-1, 4)
        frames.append((g_boxes, g_rank, g_bbox, dc, d_boxes, d_scores, d_bbox))
    entries = []
    for crit in config.criteria:
        for regime in config.regimes:
            r = REGIMES.index(regime)
            all_scores, all_flags, total = [], [], 0
            for g_boxes, g_rank, g_bbox, dc, d_boxes, d_scores, d_bbox in frames:
                valid = g_rank <= r
                total += int(valid.sum())
                regions = np.concatenate([dc, g_bbox[~valid]])
                flags = match(d_boxes, g_boxes, crit, valid, (d_bbox, regions), config.distance_mode, d_scores)
                all_scores.append(d_scores)
                all_flags.append(flags)
            scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
            flags = np.concatenate(all_flags) if all_flags else np.zeros(0, dtype=np.int64)
            curve = pr_curve(scores, flags, total)
            ap = average_precision(curve, config.interpolation)
            entries.append(EvalEntry(crit, regime, ap, total, int((flags == TP).sum()), int((flags == FP).sum()), curve))
    return EvalReport(entries, config)


def evaluate(det_dir, gt_dir, config: EvalConfig | None = None, out_dir=None) -> EvalReport:
    """Evaluate KITTI label directories; optionally write CSVs and SVG plots.

    ``out_dir`` receives ``report.csv``, ``report.txt``, ``pr/<name>.csv``
    and ``plots/<criterion>.svg``.
    """
    report = evaluate_labels(read_label_dir(det_dir), read_label_dir(gt_dir), config)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def curve_name(entry: EvalEntry) -> str:
    return f"{entry.criterion.kind}_{entry.criterion.threshold:g}_{entry.regime}"


def write_pr_csv(path, curve: PRCurve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("recall", "precision"))
        for r, p in zip(curve.recall, curve.precision):
            w.writerow([repr(float(r)), repr(float(p))])


def read_pr_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return np.array([float(r["recall"]) for r in rows]), np.array([float(r["precision"]) for r in rows])


def write_report(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    (out / "pr").mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.table() + "\n")
    for e in report.entries:
        write_pr_csv(out / "pr" / f"{curve_name(e)}.csv", e.curve)
    plot_pr_dir(out / "pr", out / "plots")


def plot_pr_dir(pr_dir, plot_dir) -> list[Path]:
    """One SVG per criterion with a curve per regime, from ``pr/*.csv`` files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pr_dir, plot_dir = Path(pr_dir), Path(plot_dir)
    plot_dir.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list] = {}
    for p in sorted(pr_dir.glob("*.csv")):
        crit, _, regime = p.stem.rpartition("_")
        groups.setdefault(crit, []).append((regime, p))
    written = []
    for crit, items in groups.items():
        fig, ax = plt.subplots(figsize=(4, 3.5))
        for regime, p in sorted(items, key=lambda t: _regime_rank(t[0])):
            r, prec = read_pr_csv(p)
            ax.step(np.r_[0.0, r], np.r_[prec[:1] if len(prec) else [0.0], prec], where="pre", label=regime)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(crit)
        ax.legend(loc="lower left")
        fig.tight_layout()
        path = plot_dir / f"{crit}.svg"
        plt.rcParams["svg.hashsalt"] = "stereo3d"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
