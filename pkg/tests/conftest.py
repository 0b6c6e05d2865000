import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_camera():
    from nc4dgs.camera import CameraView, intrinsics_from_fov, look_at

    K = intrinsics_from_fov(40.0, 32, 32)
    return CameraView(K, look_at((0.3, 0.2, 2.5), (0.0, 0.0, 0.0)), 32, 32)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
