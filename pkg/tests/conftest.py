import numpy as np
import pytest

from seal.geom import CalibrationChain, CameraIntrinsics, RigidTransform


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_transform(rng, scale=5.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.normal(0, scale, 3))


def random_chain(rng) -> CalibrationChain:
    w, h = int(rng.integers(32, 640)), int(rng.integers(32, 480))
    intr = CameraIntrinsics(rng.uniform(50, 500), rng.uniform(50, 500), rng.uniform(0, w - 1), rng.uniform(0, h - 1), w, h)
    return CalibrationChain(intr, *(random_transform(rng) for _ in range(4)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria verdicts, printed once at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[num])
