import numpy as np
import pytest

from stereo3d.errors import DegenerateRig, MalformedMatrix, MissingMatrix, NonPositiveDepth
from stereo3d.geometry import (
    StereoCalibration,
    in_frustum,
    parse_calibration,
    project,
    projection_matrix,
    serialize_calibration,
)

KITTI_P2 = "721.5377 0.0 609.5593 44.85728 0.0 721.5377 172.854 0.2163791 0.0 0.0 1.0 0.002745884"


def _row(vals):
    return " ".join(repr(float(v)) for v in np.ravel(vals))


def test_project_principal_point(toy_rig):
    np.testing.assert_allclose(project(toy_rig.p_left, (0, 0, 10)), (50, 30))


def test_project_offset_point(toy_rig):
    np.testing.assert_allclose(project(toy_rig.p_left, (1, 0, 10)), (60, 30))


def test_project_right_view_disparity(toy_rig):
    ul = project(toy_rig.p_left, (0, 0, 10))
    ur = project(toy_rig.p_right, (0, 0, 10))
    np.testing.assert_allclose(ur, (45, 30))
    assert ul[0] - ur[0] == pytest.approx(100 * 0.5 / 10)


@pytest.mark.parametrize("z", [0.0, -1.0, 1e-7])
def test_project_rejects_nonpositive_depth(toy_rig, z):
    with pytest.raises(NonPositiveDepth):
        project(toy_rig.p_left, (0, 0, z))


def test_disparity_fuzz(toy_rig, rng):
    pts = np.column_stack([rng.uniform(-20, 20, 10_000), rng.uniform(-5, 5, 10_000), rng.uniform(0.5, 100, 10_000)])
    for p in pts:
        d = project(toy_rig.p_left, p)[0] - project(toy_rig.p_right, p)[0]
        expect = toy_rig.focal_px * toy_rig.baseline_m / p[2]
        assert abs(d - expect) <= 1e-6 * expect


def test_project_scale_invariant(toy_rig, rng):
    for k in (-3.0, 0.01, 7.5):
        for _ in range(20):
            p = np.array([rng.uniform(-5, 5), rng.uniform(-2, 2), rng.uniform(1, 50)])
            np.testing.assert_allclose(project(k * toy_rig.p_left, p), project(toy_rig.p_left, p), rtol=0, atol=1e-9)


def test_parse_kitti_baseline():
    p3 = projection_matrix(721.5377, (609.5593, 172.854), -339.5)
    text = f"P2: {_row(projection_matrix(721.5377, (609.5593, 172.854)))}\nP3: {_row(p3)}\n"
    calib = parse_calibration(text)
    assert calib.baseline_m == pytest.approx(339.5 / 721.5377, abs=1e-12)
    assert calib.baseline_m == pytest.approx(0.4706, abs=1e-4)
    assert calib.focal_px == 721.5377
    assert calib.principal_point == (609.5593, 172.854)


def test_parse_real_kitti_rows():
    text = (
        "P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 "
        "0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00\n"
        f"P2: {KITTI_P2}\n"
        "P3: 721.5377 0.0 609.5593 -339.5242 0.0 721.5377 172.854 2.199936 0.0 0.0 1.0 0.002729905\n"
        "R0_rect: 1 0 0 0 1 0 0 0 1\n"
    )
    calib = parse_calibration(text)
    assert calib.baseline_m == pytest.approx((44.85728 + 339.5242) / 721.5377, rel=1e-12)


def test_parse_degenerate_rig():
    with pytest.raises(DegenerateRig):
        parse_calibration(f"P2: {KITTI_P2}\nP3: {KITTI_P2}\n")


def test_parse_order_and_comments(toy_rig):
    canonical = serialize_calibration(toy_rig)
    lines = canonical.splitlines()
    permuted = "# a comment\n" + "\n".join(reversed(lines)) + "\n\n   # trailing\nTr_velo_to_cam: 1 2 3\n"
    assert parse_calibration(permuted) == parse_calibration(canonical) == toy_rig


def test_parse_whitespace_tolerant(toy_rig):
    text = serialize_calibration(toy_rig).replace(" ", "   \t").replace(":", " :")
    assert parse_calibration(text) == toy_rig


def test_parse_missing_matrix():
    with pytest.raises(MissingMatrix):
        parse_calibration(f"P2: {KITTI_P2}\n")


def test_parse_malformed_matrix():
    with pytest.raises(MalformedMatrix):
        parse_calibration(f"P2: {KITTI_P2}\nP3: 1 2 3\n")
    with pytest.raises(MalformedMatrix):
        parse_calibration(f"P2: {KITTI_P2}\nP3: {KITTI_P2.replace('1.0', 'x')}\n")


def test_grayscale_pair_flag():
    p0 = projection_matrix(700.0, (600.0, 170.0))
    p1 = projection_matrix(700.0, (600.0, 170.0), -350.0)
    text = f"P0: {_row(p0)}\nP1: {_row(p1)}\nP2: {KITTI_P2}\n"
    calib = parse_calibration(text, left_key="P0", right_key="P1")
    assert calib.baseline_m == pytest.approx(0.5)


def test_serialize_roundtrip(rng):
    for _ in range(50):
        calib = StereoCalibration.from_rig(
            rng.uniform(50, 1000), (rng.uniform(0, 600), rng.uniform(0, 200)), rng.uniform(0.05, 1.0), (640, 200)
        )
        back = parse_calibration(serialize_calibration(calib))
        np.testing.assert_allclose(back.p_left, calib.p_left, rtol=0, atol=1e-9)
        np.testing.assert_allclose(back.p_right, calib.p_right, rtol=0, atol=1e-9)
        assert back.baseline_m == pytest.approx(calib.baseline_m, abs=1e-9)


def test_calibration_invariants(toy_rig):
    assert toy_rig.baseline_m == pytest.approx(-toy_rig.p_right[0, 3] / toy_rig.focal_px, abs=1e-9)
    mask = np.ones((3, 4), bool)
    mask[0, 3] = False
    np.testing.assert_array_equal(toy_rig.p_left[mask], toy_rig.p_right[mask])
    assert toy_rig.p_left[2, 2] != 0


def test_calibration_immutable(toy_rig):
    with pytest.raises(ValueError):
        toy_rig.p_left[0, 0] = 5.0


def test_in_frustum_examples(toy_rig):
    assert in_frustum(toy_rig, (0, 0, 35), (0, 70))
    assert not in_frustum(toy_rig, (0, 0, 71), (0, 70))
    # u = 100 * x / 10 + 50 = -1
    assert not in_frustum(toy_rig, (-5.1, 0, 10), (0, 70))
    assert in_frustum(toy_rig, (0, 0, 70), (0, 70))
    assert not in_frustum(toy_rig, (0, 0, 0.2), (0.5, 70))


def test_in_frustum_bad_range(toy_rig):
    with pytest.raises(ValueError):
        in_frustum(toy_rig, (0, 0, 10), (10, 5))


def test_scaled_calibration(toy_rig):
    s = toy_rig.scaled(2.0, 2.0, (200, 120))
    assert s.focal_px == 200
    assert s.baseline_m == pytest.approx(toy_rig.baseline_m)
