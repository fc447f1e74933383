import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def point_mass_field(x, t, **_):
    """v(x, t) = -x / (1 - t): the tangent of a unit point mass at the origin (linear path)."""
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        t = np.broadcast_to(t, (len(x),))[:, None]
    return -x / (1.0 - t)


def point_mass_secant(x, t, s, **_):
    """Exact secant of the point-mass field; trajectories are straight lines."""
    return point_mass_field(x, t)


def zero_model(x, t, s=None, **_):
    return np.zeros_like(np.asarray(x, dtype=np.float64))


# One line per acceptance criterion, filled in by tests/test_acceptance.py.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
