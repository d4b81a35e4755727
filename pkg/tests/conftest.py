import numpy as np
import pytest
from hypothesis import strategies as st

from sir.geometry import Camera, Extrinsics, Intrinsics
from sir.oracle import NADIR


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng, width=None, height=None, distortion=True) -> Camera:
    # distortion stays inside the range where fixed-point undistortion contracts
    width = width or int(rng.integers(64, 4000))
    height = height or int(rng.integers(64, 3000))
    f = rng.uniform(0.8, 2.0) * width
    intr = Intrinsics(
        f * rng.uniform(0.9, 1.1),
        f * rng.uniform(0.9, 1.1),
        width * rng.uniform(0.3, 0.7),
        height * rng.uniform(0.3, 0.7),
        rng.uniform(-0.05, 0.05) if distortion else 0.0,
        rng.uniform(-0.01, 0.01) if distortion else 0.0,
    )
    ext = Extrinsics(random_rotation(rng), rng.normal(size=3) * 10)
    return Camera(intr, ext, width, height)


def point_in_view(rng, camera: Camera, depth_range=(2.0, 50.0), radius=0.6) -> np.ndarray:
    """A world point in front of ``camera`` with normalized radius <= ``radius``."""
    from sir.geometry import camera_to_world

    r = radius * np.sqrt(rng.uniform())
    a = rng.uniform(0, 2 * np.pi)
    z = rng.uniform(*depth_range)
    return camera_to_world(camera.extrinsics, np.array([r * np.cos(a) * z, r * np.sin(a) * z, z]))


def nadir_camera(center, width=64, height=48, focal=64.0) -> Camera:
    intr = Intrinsics(focal, focal, width / 2, height / 2)
    return Camera(intr, Extrinsics.from_center(NADIR, center), width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


seeds = st.integers(min_value=0, max_value=2**32 - 1)


ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> None:
    """Record one acceptance line, print it, then fail the test if needed."""
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
