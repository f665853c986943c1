import numpy as np
import pytest
from hypothesis import settings
from scipy.spatial.transform import Rotation

from mobcpd.core import LabeledCloud

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng):
    return Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()


def random_cloud(rng, M, L=1, spread=40.0):
    pts = rng.normal(0, spread, (M, 3))
    labels = np.arange(M) % L + 1
    return LabeledCloud(pts, labels, L)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k.split()[0])):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
