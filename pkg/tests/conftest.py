import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)


def unit(v):
    return v / np.linalg.norm(v)


@st.composite
def unit_vectors(draw):
    v = draw(vec3)
    if np.linalg.norm(v) < 1e-3:
        v = np.array([0.0, 0.0, 1.0])
    return unit(v)


@st.composite
def rotation_vectors(draw, max_angle=np.pi - 1e-6):
    axis = draw(unit_vectors())
    angle = draw(st.floats(0.0, max_angle))
    return axis * angle


@st.composite
def psd3(draw, scale=1.0):
    A = draw(arrays(np.float64, (3, 3), elements=st.floats(-1, 1)))
    return scale * A @ A.T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
