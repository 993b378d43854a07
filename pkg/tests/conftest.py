import numpy as np
import pytest

from stedfv.data import VideoDescriptorSet, VideoHeader


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_video(rng, m=20, dim=3, width=64, height=48, frames=30):
    header = VideoHeader(width, height, frames, dim)
    xyt = np.column_stack([
        rng.uniform(0, width, m),
        rng.uniform(0, height, m),
        rng.uniform(0, frames - 1, m),
    ]).astype(np.float32)
    # guard the open upper bound after float32 rounding
    xyt[:, 0] = np.minimum(xyt[:, 0], np.nextafter(np.float32(width), 0, dtype=np.float32))
    xyt[:, 1] = np.minimum(xyt[:, 1], np.nextafter(np.float32(height), 0, dtype=np.float32))
    phi = rng.standard_normal((m, dim)).astype(np.float32)
    return VideoDescriptorSet(header, xyt, phi)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[n])
