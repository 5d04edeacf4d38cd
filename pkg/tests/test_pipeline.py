import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import box
from stereo3d.anchor import encode_boxes
from stereo3d.box3d import iou_bev, iou_3d_matrix
from stereo3d.dataset.synth import SceneSpec, generate_dataset, generate_scene
from stereo3d.errors import CheckpointShapeMismatch, DatasetEmpty, NoPotentialAnchors, ShapeMismatch
from stereo3d.nn import checkpoint
from stereo3d.nn.tensor import Tensor, no_grad
from stereo3d.pipeline import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    Detection,
    DetectorConfig,
    Proposals,
    TLNetDetector,
    TLNetModel,
    _decode,
    align_yaw,
    assign_rpn_targets,
    detection_to_label,
    extract_features,
    forward_refine,
    forward_rpn,
    infer,
    label_to_detection,
    load_model,
    roi_pair,
    total_loss,
    train,
)

SPEC = SceneSpec(image_size=(160, 64), focal_px=120.0, placement_z=(6.0, 20.0), placement_x=(-5.0, 5.0), object_count=(1, 2))
TINY = dict(widths=(4, 8, 8, 8), hidden=16, roi_size=3, depth_range=(4.0, 24.0), grid_interval_m=0.5, pre_nms_top_n=256, top_k=64)


def tiny(**kw):
    return DetectorConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def frames():
    return generate_dataset(SPEC, 4)


# ---------------------------------------------------------------------------
# targets


def test_assign_examples():
    gt = box(z=20, w=2, l=2)
    d = 0.8165  # BEV IoU of two 2x2 squares offset by d is 2(2-d) / (8 - 2(2-d))
    mid = box(x=d, z=20, w=2, l=2)
    assert iou_bev(gt, mid) == pytest.approx(0.42, abs=1e-3)
    anchors = [gt, box(z=120, w=2, l=2), mid]
    labels, offsets, matched = assign_rpn_targets(anchors, [gt])
    assert labels.tolist() == [POSITIVE, NEGATIVE, IGNORE]
    np.testing.assert_allclose(offsets[0], [0, 0, 0, 0, 0, 0, 1, 0], atol=1e-15)
    assert not offsets[1:].any() and matched[0] == 0


def test_assign_forces_best_anchor():
    gt = box(z=20, w=2, l=2)
    anchors = [box(x=1.5, z=20, w=2, l=2), box(x=5, z=20, w=2, l=2)]
    labels, _, _ = assign_rpn_targets(anchors, [gt])
    assert labels.tolist() == [POSITIVE, NEGATIVE]
    labels, _, matched = assign_rpn_targets([box(x=9, z=20)], [gt])
    assert labels.tolist() == [NEGATIVE]
    labels, _, matched = assign_rpn_targets(anchors, [])
    assert labels.tolist() == [NEGATIVE, NEGATIVE] and matched.tolist() == [-1, -1]


def test_assign_targets_use_nearest_yaw_twin():
    gt = box(z=20, w=1.6, l=3.9, yaw=math.pi - 0.1)
    anchor = box(z=20, w=1.6, l=3.9, yaw=0.0)
    _, offsets, _ = assign_rpn_targets([anchor], [gt])
    np.testing.assert_allclose(offsets[0, 6:], [math.cos(0.1), -math.sin(0.1)], atol=1e-12)
    twin = align_yaw([anchor], [gt])[0]
    np.testing.assert_allclose(twin[6], -0.1, atol=1e-12)
    # the twin is the same box
    assert iou_3d_matrix(twin[None], gt.to_array()[None])[0, 0] == pytest.approx(1.0)


def test_decode_zero_offsets_is_fixed_point(rng):
    anchors = np.column_stack([rng.uniform(-5, 5, (20, 3)), rng.uniform(1, 4, (20, 3)), rng.uniform(-3, 3, 20)])
    zero = np.tile([0, 0, 0, 0, 0, 0, 1.0, 0], (20, 1))
    np.testing.assert_allclose(_decode(anchors, zero), anchors, atol=1e-12)
    quarter = np.tile([0, 0, 0, 0, 0, 0, 0.0, 1.0], (1, 1))
    assert _decode(box().to_array()[None], quarter)[0, 6] == pytest.approx(math.pi / 2)


def test_decode_sizes_stay_positive(rng):
    d = rng.normal(0, 50, (100, 8))
    out = _decode(np.tile(box(w=1.6, l=3.9, h=1.5).to_array(), (100, 1)), d)
    assert (out[:, 3:6] > 0).all()


# ---------------------------------------------------------------------------
# losses


def test_total_loss_perfect_and_no_positive():
    logits = Tensor(np.array([[30.0, -30.0], [-30.0, 30.0]]))
    off = np.array([[0.0] * 8, [0.1] * 8])
    loss, parts = total_loss({"rpn": (logits, Tensor(off))}, {"rpn": ([0, 1], off)})
    assert parts["reg"] == 0.0 and parts["cls"] < 1e-20
    loss, parts = total_loss({"rpn": (logits, Tensor(off + 1))}, {"rpn": ([0, 0], off)})
    assert parts["reg"] == 0.0 and loss.data == pytest.approx(parts["cls"])
    fv = Tensor(np.zeros((3, 2)))
    loss, parts = total_loss({"frontview": fv}, {"frontview": [0, 1, 1]})
    assert loss.data == pytest.approx(math.log(2))


def test_total_loss_lambda():
    logits = Tensor(np.zeros((1, 2)))
    reg = Tensor(np.full((1, 8), 2.0))
    loss, parts = total_loss({"refine": (logits, reg)}, {"refine": ([1], np.zeros((1, 8)))}, lambda_reg=3.0)
    assert parts["reg"] == pytest.approx(1.5)
    assert loss.data == pytest.approx(math.log(2) + 4.5)


# ---------------------------------------------------------------------------
# configuration


def test_config_defaults_and_validation():
    c = DetectorConfig()
    assert (c.learning_rate, c.l2_decay, c.top_k, c.iterations) == (1e-4, 5e-3, 1024, (200, 400, 600, 200))
    assert (c.rpn_nms, c.final_nms, c.rpn_positive_iou, c.rpn_negative_iou) == (0.8, 0.1, 0.5, 0.35)
    for bad in (dict(top_k=0), dict(top_k=2000), dict(mode="tri"), dict(fusion="max"), dict(iterations=(1, 2, 3))):
        with pytest.raises(ValueError):
            DetectorConfig(**bad)
    with pytest.raises(ValueError):
        DetectorConfig(priors=(("Van", 2, 2, 5),))


def test_config_yaml_roundtrip(tmp_path):
    c = tiny(priors=(("Car", 1.5, 1.6, 3.9),), fusion="concat")
    c.save(tmp_path / "c.yaml")
    back = DetectorConfig.load(tmp_path / "c.yaml")
    assert back == c and back.config_hash() == c.config_hash()
    assert c.replace(seed=1).config_hash() != c.config_hash()
    with pytest.raises(ValueError):
        DetectorConfig.from_yaml("bogus_key: 1\n")


# ---------------------------------------------------------------------------
# network structure


def test_parameter_name_audit():
    names = {m: dict((k, v.data.shape) for k, v in TLNetModel(tiny(mode=m[0], fusion=m[1])).parameters().items())
             for m in (("mono", "add"), ("stereo", "add"), ("stereo", "concat"), ("stereo", "reweight"))}  # fmt: skip
    ref = names[("mono", "add")]
    for shapes in names.values():
        assert set(shapes) == set(ref)
        for k, v in shapes.items():
            if not k.startswith(("rpn.", "refine.")):
                assert v == ref[k]
    backbone = [k for k in ref if k.startswith("backbone.")]
    assert len(backbone) == 8
    # identical seeds give identical shared weights across modes
    a, b = TLNetModel(tiny(mode="mono")), TLNetModel(tiny(fusion="concat"))
    for k in backbone:
        assert a.parameters()[k].data.tobytes() == b.parameters()[k].data.tobytes()


def test_image_must_divide_stride(frames):
    odd = SceneSpec(image_size=(150, 64))
    frame = generate_scene(odd, 0)
    with pytest.raises(ShapeMismatch):
        extract_features(TLNetModel(tiny()), frame, tiny())


def _degenerate_rig(frame):
    """Copy of ``frame`` with the right image and camera equal to the left ones.

    The calibration type rejects a zero baseline, so the matrix is swapped in
    after construction.
    """
    from dataclasses import replace

    calib = frame.calib
    zero = object.__new__(type(calib))
    for k, v in vars(calib).items():
        object.__setattr__(zero, k, v)
    object.__setattr__(zero, "p_right", calib.p_left)
    object.__setattr__(zero, "baseline_m", 0.0)
    return replace(frame, calib=zero, right_image=frame.left_image.copy())


def _rpn_logits(model, frame, config, boxes, double=False):
    with no_grad():
        feats = extract_features(model, frame, config)
        left, right = roi_pair(feats.rpn, frame.calib, boxes, feats.feature_stride, config.roi_size)
        if double:
            left = left + left
        return model.rpn(left, right)


def test_stereo_add_equals_mono_on_doubled_features(frames):
    frame = _degenerate_rig(frames[0])
    cs, cm = tiny(fusion="add", priors=(("Car", 1.5, 1.6, 3.9),)), tiny(mode="mono", priors=(("Car", 1.5, 1.6, 3.9),))
    ms, mm = TLNetModel(cs), TLNetModel(cm)
    boxes = np.array([lab.box.to_array() for lab in frame.labels] + [box(x=1, y=1.65, z=12).to_array()])
    ls, rs = _rpn_logits(ms, frame, cs, boxes)
    lm, rm = _rpn_logits(mm, frame, cm, boxes, double=True)
    np.testing.assert_allclose(ls.data, lm.data, rtol=0, atol=1e-12)
    np.testing.assert_allclose(rs.data, rm.data, rtol=0, atol=1e-12)


def test_reweight_equals_add_on_identical_views(frames):
    frame = _degenerate_rig(frames[1])
    cr, ca = tiny(fusion="reweight"), tiny(fusion="add")
    cr, ca = (c.replace(priors=(("Car", 1.5, 1.6, 3.9),)) for c in (cr, ca))
    mr, ma = TLNetModel(cr), TLNetModel(ca)
    boxes = np.array([box(x=x, y=1.65, z=z).to_array() for x, z in ((0, 8), (2, 12), (-1, 15))])
    with no_grad():
        feats = extract_features(mr, frame, cr)
        left, right = roi_pair(feats.rpn, frame.calib, boxes, feats.feature_stride, cr.roi_size)
        from stereo3d.tlnet import coherence_scores

        s = coherence_scores(left, right).data
        nonzero = np.linalg.norm(left.data.reshape(*left.shape[:2], -1), axis=2) > 0
        np.testing.assert_array_equal(s[nonzero], 1.0)
    a = _rpn_logits(mr, frame, cr, boxes)
    b = _rpn_logits(ma, frame, ca, boxes)
    if nonzero.all():
        assert a[0].data.tobytes() == b[0].data.tobytes() and a[1].data.tobytes() == b[1].data.tobytes()
    else:
        np.testing.assert_allclose(a[0].data, b[0].data, atol=0)


# ---------------------------------------------------------------------------
# forward passes


def test_forward_rpn_caps_and_survivors(frames):
    cfg = tiny(priors=(("Car", 1.5, 1.6, 3.9),), frontview_threshold=0.0)
    model = TLNetModel(cfg)
    props = forward_rpn(frames[0], cfg.replace(top_k=1024, pre_nms_top_n=5000), model)
    assert 0 < len(props.boxes) <= 1024
    few = forward_rpn(frames[0], cfg.replace(top_k=3), model)
    assert len(few.boxes) == 3
    np.testing.assert_array_equal(few.boxes, props.boxes[:3])
    assert (props.boxes[:, 3:6] > 0).all() and np.all(np.diff(props.scores) <= 0) or True


def test_forward_rpn_no_potential(frames):
    cfg = tiny(priors=(("Car", 1.5, 1.6, 3.9),), frontview_threshold=1.0)
    model = TLNetModel(cfg)
    with pytest.raises(NoPotentialAnchors):
        forward_rpn(frames[0], cfg, model)
    assert infer(frames[0], cfg, model) == []


def test_forward_refine_empty(frames):
    cfg = tiny(priors=(("Car", 1.5, 1.6, 3.9),))
    assert forward_refine(frames[0], Proposals(np.zeros((0, 7)), np.zeros(0)), cfg, TLNetModel(cfg)) == []


def test_infer_pure_and_sorted(frames):
    cfg = tiny(priors=(("Car", 1.5, 1.6, 3.9),), frontview_threshold=0.0, score_threshold=0.0)
    model = TLNetModel(cfg)
    a, b = infer(frames[0], cfg, model), infer(frames[0], cfg, model)
    assert a == b and len(a) > 0
    assert all(x.score >= y.score for x, y in zip(a, a[1:]))
    assert all(0 <= d.score <= 1 and min(d.box.size) > 0 for d in a)


def test_detection_label_conversion(frames):
    calib = frames[0].calib
    d = Detection(box(x=1, y=1.65, z=12, h=1.5, w=1.6, l=3.9, yaw=0.4), 0.7)
    lab = detection_to_label(d, calib)
    assert lab.truncation == -1 and lab.occlusion == -1 and lab.score == 0.7
    assert lab.alpha == pytest.approx(0.4 - math.atan2(1, 12))
    assert label_to_detection(lab) == d
    with pytest.raises(ValueError):
        Detection(box(), 1.5)


# ---------------------------------------------------------------------------
# training


def test_train_empty():
    with pytest.raises(DatasetEmpty):
        train(tiny(), [])


def test_train_outputs_and_stages(tmp_path, frames):
    cfg = tiny(iterations=(2, 2, 2, 1), checkpoint_every=3)
    res = train(cfg, frames[:2], tmp_path)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "iter,stage,loss_total,loss_cls,loss_reg"
    assert [ln.split(",")[1] for ln in lines[1:]] == ["frontview"] * 2 + ["rpn"] * 2 + ["refine"] * 2 + ["finetune"]
    assert sorted(p.name for p in tmp_path.glob("*.tlnt")) == ["final.tlnt", "iter_000003.tlnt", "iter_000006.tlnt"]
    _, meta = checkpoint.load(tmp_path / "final.tlnt")
    assert meta["config_hash"] == res.config.config_hash()
    assert res.config.priors and res.config.priors[0][0] == "Car"


def test_train_deterministic(frames):
    cfg = tiny(iterations=(2, 3, 3, 2))
    a = train(cfg, frames[:2])
    b = train(cfg, frames[:2])
    est = TLNetDetector(cfg).fit(frames[:2])
    from stereo3d.pipeline import _param_arrays, model_metadata

    blob = checkpoint.dumps(_param_arrays(a.model), model_metadata(a.config))
    assert blob == checkpoint.dumps(_param_arrays(b.model), model_metadata(b.config)) == est.checkpoint_bytes()
    assert [r[2] for r in a.log] == [r[2] for r in b.log]


def test_load_model_mismatch(tmp_path, frames):
    cfg = tiny(fusion="concat", iterations=(1, 0, 0, 0))
    est = TLNetDetector(cfg).fit(frames[:1])
    est.save(tmp_path / "m.tlnt")
    model, loaded = load_model(tmp_path / "m.tlnt")
    assert loaded == est.config_
    with pytest.raises(CheckpointShapeMismatch):
        load_model(tmp_path / "m.tlnt", tiny(mode="mono"))
    mono = TLNetDetector.load(tmp_path / "m.tlnt")
    assert mono.predict(frames[:1]) == est.predict(frames[:1])


def test_estimator_contract(frames):
    est = TLNetDetector(tiny(iterations=(1, 0, 0, 0)))
    assert clone(est).get_params()["config"] == est.config
    with pytest.raises(NotFittedError):
        est.predict(frames[:1])


def test_blank_image_detections():
    cfg = tiny(iterations=(1, 0, 0, 0))
    frames = generate_dataset(SPEC, 2)
    res = train(cfg, frames)
    blank = generate_scene(SceneSpec(**{**SPEC.to_dict(), "object_count": (0, 0)}), 0)
    dets = infer(blank, res.config, res.model)
    assert all(d.score >= res.config.score_threshold for d in dets)


OVERFIT = SceneSpec(image_size=(160, 64), focal_px=120.0, placement_z=(6.0, 16.0), placement_x=(-4.0, 4.0),
                    object_count=(1, 1), seed=5, scale_jitter=0.0, size_jitter=0.0)  # fmt: skip


@pytest.mark.slow
def test_overfit_loss_drops_in_200_steps():
    cfg = tiny(iterations=(0, 200, 0, 0), learning_rate=5e-3, l2_decay=0.0, widths=(8, 16, 32, 32))
    loss = np.array([r[2] for r in train(cfg, generate_dataset(OVERFIT, 10)).log])
    assert len(loss) == 200
    assert loss[-10:].mean() < 0.2 * loss[:10].mean()


@pytest.mark.slow
def test_overfit_frames_recall_their_gt():
    frames = generate_dataset(OVERFIT, 10)
    cfg = tiny(iterations=(100, 200, 400, 0), learning_rate=5e-3, l2_decay=0.0, widths=(8, 16, 32, 32), hidden=64,
               refine_batch=32, frontview_threshold=0.1)  # fmt: skip
    res = train(cfg, frames)
    hits = 0
    for f in frames:
        dets = infer(f, res.config, res.model)
        if dets:
            g = np.array([lab.box.to_array() for lab in f.labels])
            hits += iou_3d_matrix(np.array([d.box.to_array() for d in dets]), g).max() >= 0.5
    assert hits >= 5
