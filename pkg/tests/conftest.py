import numpy as np
import pytest

from stereo3d.box3d import OrientedBox3D
from stereo3d.geometry import StereoCalibration


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_rig():
    # f=100, c=(50,30), b=0.5
    return StereoCalibration.from_rig(100.0, (50.0, 30.0), 0.5, (100, 60))


def random_boxes(rng, n, spread=3.0):
    """(n, 7) boxes with centers near the origin."""
    out = np.empty((n, 7))
    out[:, 0] = rng.uniform(-spread, spread, n)
    out[:, 1] = rng.uniform(-0.5, 0.5, n)
    out[:, 2] = rng.uniform(-spread, spread, n)
    out[:, 3:6] = rng.uniform(0.5, 4.0, (n, 3))
    out[:, 6] = rng.uniform(-np.pi, np.pi, n)
    return out


def box(x=0.0, y=0.0, z=0.0, h=1.0, w=1.0, l=1.0, yaw=0.0):  # noqa: E741
    return OrientedBox3D((x, y, z), (h, w, l), yaw)


def pytest_terminal_summary(terminalreporter):
    import sys

    lines = getattr(sys.modules.get("test_acceptance"), "LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
