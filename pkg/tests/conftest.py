import numpy as np
import pytest

from evflow import CameraGeometry, EncoderConfig, EventSlice

# One line per acceptance criterion, filled by tests/test_acceptance.py and
# echoed after the run regardless of capture mode.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_random_slice(rng, n, width=32, height=32, window=0.032, geometry=None):
    """Random slice with events sorted by time; coordinates uniform."""
    if geometry is None:
        geometry = CameraGeometry(width, height)
    t = np.sort(rng.uniform(0.0, window, size=n))
    x = rng.integers(0, geometry.width, size=n)
    y = rng.integers(0, geometry.height, size=n)
    return EventSlice(t=t, x=x, y=y, t_start=0.0, window=window, geometry=geometry)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def small_cfg():
    return EncoderConfig(delta_t=0.016, delta_x=4, delta_y=4, embed_dim=16,
                         sigma2=25.0, precision="f64")
