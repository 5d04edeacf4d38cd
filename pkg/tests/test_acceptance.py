"""Acceptance criteria, one test each.

Every test prints a ``PASS``/``FAIL`` line and the lines are repeated in the
terminal summary. Criterion 6 trains four detectors on synthetic data and
takes most of the runtime (about 25 minutes on one CPU core).

    pytest tests/test_acceptance.py -v
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from conftest import box
from oracles import brute_eval, mc_iou
from stereo3d.anchor import generate_anchor_pool
from stereo3d.box3d import OrientedBox3D, bev_polygon, clip_polygon, iou_3d, iou_bev, polygon_area
from stereo3d.dataset.kitti import parse_calibration, parse_label_line, serialize_calibration, serialize_label
from stereo3d.dataset.synth import SceneSpec, generate_dataset
from stereo3d.evaluation import DEFAULT_CRITERIA, EvalConfig, evaluate_labels
from stereo3d.geometry import StereoCalibration, project_points
from stereo3d.gradsuite import COMPOSED_TOLERANCE, OP_TOLERANCE, run_suite
from stereo3d.nn import checkpoint
from stereo3d.pipeline import DetectorConfig, TLNetDetector, _param_arrays, box_rois, detection_to_label, infer, train
from stereo3d.tlnet import coherence_scores, reweight
from test_evaluation import IOU_FNS, make_fixture

DATA = Path(__file__).parent / "data"
CONFIGS = Path(__file__).parents[1] / "configs"
LINES: list[str] = []
PRIORS = DetectorConfig(priors=(("Car", 1.52, 1.63, 3.88),)).prior_list()


def report(capsys, n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    LINES.append(line)
    with capsys.disabled():
        print("\n" + line)


# ---------------------------------------------------------------------------


def test_1_gradient_suite(capsys):
    t = time.perf_counter()
    ops_rep, comp_rep = run_suite(20, seed=0)
    elapsed = time.perf_counter() - t
    ok = ops_rep.max_error <= OP_TOLERANCE and comp_rep.max_error <= COMPOSED_TOLERANCE and elapsed < 120
    report(capsys, 1, ok, f"ops max rel err {ops_rep.max_error:.2e} (<= {OP_TOLERANCE:g}) over {len(ops_rep.errors)} "
           f"checks, composed {comp_rep.max_error:.2e} (<= {COMPOSED_TOLERANCE:g}), {elapsed:.1f}s (< 120s)")  # fmt: skip
    assert ok


def _pair(rng):
    a = np.array([rng.uniform(-3, 3), rng.uniform(-0.5, 0.5), rng.uniform(-3, 3), *rng.uniform(0.5, 4, 3), rng.uniform(-np.pi, np.pi)])
    b = a.copy()
    b[:3] += rng.normal(0, [1.0, 0.4, 1.0])
    b[3:6] *= rng.uniform(0.6, 1.4, 3)
    b[6] = rng.uniform(-np.pi, np.pi)
    return a, b


def test_2_geometry_oracles(capsys):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        a, b = _pair(rng)
        ba, bb = OrientedBox3D.from_array(a), OrientedBox3D.from_array(b)
        worst = max(worst, abs(iou_bev(ba, bb) - mc_iou(a, b, 1_000_000, rng, bev=True)))
        worst = max(worst, abs(iou_3d(ba, bb) - mc_iou(a, b, 1_000_000, rng)))
    r2 = math.sqrt(2)
    square = box(w=1, l=1), box(w=1, l=1, yaw=math.pi / 4)
    closed = [
        (iou_3d(box(1, 2, 3, 1.5, 1.6, 3.9, 0.4), box(1, 2, 3, 1.5, 1.6, 3.9, 0.4)), 1.0),
        (iou_bev(box(w=1, l=1), box(x=0.5, w=1, l=1)), 1 / 3),
        (iou_3d(box(h=2, w=1, l=1), box(y=-1, h=2, w=1, l=1)), 1 / 3),
        (polygon_area(clip_polygon(bev_polygon(square[0]), bev_polygon(square[1]))), 2 * (r2 - 1)),
        (iou_bev(*square), 2 * (r2 - 1) / (2 - 2 * (r2 - 1))),
    ]
    closed_err = max(abs(got - want) for got, want in closed)
    ok = worst <= 1e-2 and closed_err <= 5e-3
    report(capsys, 2, ok, f"max |IoU - MC(1e6)| {worst:.2e} on 1000 pairs (<= 1e-2), closed forms {closed_err:.1e} (<= 5e-3)")
    assert ok


def test_3_coherence_contracts(capsys):
    rng = np.random.default_rng(3)
    n, c, k = 100_000, 4, 3
    left = rng.normal(size=(n, c, k, k))
    right = np.where(rng.uniform(size=(n, c, 1, 1)) < 0.5, left + rng.normal(0, 0.3, (n, c, k, k)), rng.normal(size=(n, c, k, k)))
    left[rng.uniform(size=n) < 0.02, 0] = 0.0
    s = coherence_scores(left, right).data
    in_range = bool(np.all((s >= -1) & (s <= 1)))
    ident = bool(np.all(coherence_scores(left[:, 1:], left[:, 1:]).data == 1.0))
    scale_l, scale_r = np.exp(rng.uniform(-5, 5, (n, c, 1, 1))), np.exp(rng.uniform(-5, 5, (n, c, 1, 1)))
    scale_err = float(np.abs(coherence_scores(left * scale_l, right * scale_r).data - s).max())
    lw, rw = reweight(left, right, s)
    norms = lambda x: np.sqrt((x**2).sum(axis=(2, 3)))  # noqa: E731
    no_growth = bool(np.all(norms(lw.data) <= norms(left)) and np.all(norms(rw.data) <= norms(right)))
    ok = in_range and ident and scale_err <= 1e-12 and no_growth
    report(capsys, 3, ok, f"{n} pairs: range {in_range}, identical->1 {ident}, scale err {scale_err:.1e} (<= 1e-12), "
           f"norms never grow {no_growth}")  # fmt: skip
    assert ok


def test_4_triangulation(capsys):
    errors, worst_pt = [], 0.0
    for f, b in ((721.5377, 0.54), (240.0, 0.54), (360.0, 1.0)):
        calib = StereoCalibration.from_rig(f, (f * 0.85, f * 0.24), b, (int(f * 1.7), int(f * 0.52)))
        pool = generate_anchor_pool(calib, 1.0, (10.0, 70.0), 1.65, PRIORS)
        boxes = pool.boxes[(pool.boxes[:, 2] >= 10) & (pool.boxes[:, 2] <= 70)]
        left, right = box_rois(calib.p_left, boxes, 1.0), box_rois(calib.p_right, boxes, 1.0)
        measured = (left[:, 0] + left[:, 2]) / 2 - (right[:, 0] + right[:, 2]) / 2
        errors.append(np.abs(measured / (f * b / boxes[:, 2]) - 1))
        pts = np.column_stack([np.random.default_rng(4).uniform(-20, 20, (1000, 2)), np.linspace(0.5, 80, 1000)])
        d = project_points(calib.p_left, pts)[:, 0] - project_points(calib.p_right, pts)[:, 0]
        worst_pt = max(worst_pt, float(np.abs(d - calib.disparity(pts[:, 2])).max()))
    errors = np.concatenate(errors)
    ok = errors.max() <= 0.05 and worst_pt <= 1e-6
    report(capsys, 4, ok, f"{len(errors)} anchors: RoI offset vs f*b/z max rel err {errors.max():.3f} (<= 0.05), "
           f"median {np.median(errors):.4f}, {100 * np.mean(errors <= 0.05):.1f}% within 5%; "
           f"point disparity err {worst_pt:.1e} (<= 1e-6)")  # fmt: skip
    assert ok


def test_5_evaluation_oracle(capsys):
    worst, monotone, count = 0.0, True, 0
    for seed in (0, 1):
        dets, gts = make_fixture(seed, frames=20)
        rep = evaluate_labels(dets, gts, EvalConfig())
        for c in DEFAULT_CRITERIA:
            for regime in ("easy", "moderate", "hard"):
                worst = max(worst, abs(rep.ap(c.kind, c.threshold, regime) - brute_eval(dets, gts, c.kind, c.threshold, regime, IOU_FNS)))
                count += 1
        for kind in ("iou3d", "ioubev"):
            for regime in ("easy", "moderate", "hard"):
                ap = [rep.ap(kind, t, regime) for t in (0.7, 0.5, 0.3)]
                monotone &= ap[0] <= ap[1] <= ap[2]
    ok = worst <= 1e-12 and monotone
    report(capsys, 5, ok, f"{count} AP values vs brute force max diff {worst:.1e} (<= 1e-12), monotone in threshold {monotone}")
    assert ok


# ---------------------------------------------------------------------------
# synthetic end to end


def _ap_moderate(result, frames, eval_cfg) -> float:
    dets = {f.id: [detection_to_label(d, f.calib) for d in infer(f, result.config, result.model)] for f in frames}
    return evaluate_labels(dets, {f.id: f.labels for f in frames}, eval_cfg).ap("iou3d", 0.5, "moderate")


def test_6_synthetic_end_to_end(capsys):
    t = time.perf_counter()
    spec = SceneSpec.from_dict(yaml.safe_load((CONFIGS / "scene_synthetic.yaml").read_text()))
    base = DetectorConfig.load(CONFIGS / "detector_synthetic.yaml")
    train_frames, test_frames = generate_dataset(spec, 200), generate_dataset(spec, 50, start=100_000)
    eval_cfg = EvalConfig(image_height=spec.image_size[1])
    runs = {"mono": ("mono", base.fusion), "reweight": ("stereo", "reweight"), "add": ("stereo", "add"), "concat": ("stereo", "concat")}

    def ap_for(seed):
        out = {}
        for name, (mode, fusion) in runs.items():
            out[name] = _ap_moderate(train(base.replace(mode=mode, fusion=fusion, seed=seed), train_frames), test_frames, eval_cfg)
        return out

    ap = ap_for(base.seed)
    seeds = [ap]
    if ap["reweight"] in (ap["add"], ap["concat"]):
        seeds += [ap_for(base.seed + k) for k in (1, 2)]
    mean = {k: float(np.mean([s[k] for s in seeds])) for k in runs}
    elapsed = time.perf_counter() - t
    gain = 100 * (mean["reweight"] - mean["mono"])
    ok_a = gain >= 5.0
    ok_b = mean["reweight"] >= mean["add"] and mean["reweight"] >= mean["concat"]
    ok_t = elapsed <= 1800
    table = ", ".join(f"{k} {100 * v:.2f}" for k, v in mean.items())
    report(capsys, 6, ok_a and ok_b and ok_t, f"AP3D@0.5 moderate ({len(seeds)} seed(s)): {table}; "
           f"(a) reweight - mono = {gain:+.2f} (>= 5) {ok_a}; (b) reweight >= add, concat {ok_b}; {elapsed:.0f}s (<= 1800s)")  # fmt: skip
    assert ok_a and ok_b and ok_t


# ---------------------------------------------------------------------------


def _determinism_run(tmp: Path):
    spec = SceneSpec(image_size=(160, 64), focal_px=120.0, placement_z=(6.0, 20.0), placement_x=(-5.0, 5.0), object_count=(1, 2))
    frames = generate_dataset(spec, 6)
    config = DetectorConfig(widths=(4, 8, 8, 8), hidden=16, roi_size=3, depth_range=(4.0, 24.0), pre_nms_top_n=256,
                            top_k=64, iterations=(3, 3, 4, 2), frontview_threshold=0.0, score_threshold=0.0)  # fmt: skip
    result = train(config, frames[:4], tmp)
    dets = {f.id: [detection_to_label(d, f.calib) for d in infer(f, result.config, result.model)] for f in frames[4:]}
    report_csv = evaluate_labels(dets, {f.id: f.labels for f in frames[4:]}, EvalConfig(image_height=64)).to_csv()
    est = TLNetDetector(config).fit(frames[:4])
    return (tmp / "final.tlnt").read_bytes(), report_csv, est.checkpoint_bytes(), checkpoint.dumps(_param_arrays(result.model), {})


def test_7_determinism(capsys, tmp_path):
    runs = [_determinism_run(tmp_path / f"run{i}") for i in range(2)]
    same_ckpt = runs[0][0] == runs[1][0] and runs[0][2] == runs[1][2]
    same_params = runs[0][3] == runs[1][3] == checkpoint.dumps(checkpoint.loads(runs[0][2])[0], {})
    same_eval = runs[0][1] == runs[1][1]
    ok = same_ckpt and same_params and same_eval
    report(capsys, 7, ok, f"two identical-seed runs: checkpoints bit-identical {same_ckpt and same_params}, eval reports identical {same_eval}")
    assert ok


def test_8_format_fidelity(capsys):
    lines = (DATA / "labels_corpus.txt").read_text().splitlines()
    bad = 0
    for line in lines:
        lab = parse_label_line(line)
        again = parse_label_line(serialize_label(lab))
        fields = [float(v) for v in line.split()[1:]]
        stored = [again.truncation, again.occlusion, again.alpha, *again.bbox2d, *again.size, *again.location, again.rotation_y]
        stored += [] if again.score is None else [again.score]
        bad += again != lab or again.class_name != line.split()[0] or fields != stored
    text = (DATA / "calib_kitti.txt").read_text()
    calib = parse_calibration(text)
    back = parse_calibration(serialize_calibration(calib))
    rows = {k: [float(v) for v in body.split()] for k, body in (ln.split(":", 1) for ln in text.splitlines())}
    calib_ok = back == calib and list(back.p_left.ravel()) == rows["P2"] and list(back.p_right.ravel()) == rows["P3"]
    ok = len(lines) == 50 and bad == 0 and calib_ok
    report(capsys, 8, ok, f"{len(lines)} label lines, {bad} changed by parse->serialize->parse; calib round trip exact {calib_ok}")
    assert ok
