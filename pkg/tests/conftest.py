import numpy as np
import pytest

from lgrad import ImageStack

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def labelled_stack(rng):
    """60 random 4x5 images, 30 per class, class 1 shifted by a known vector."""
    n, h, w = 60, 4, 5
    data = rng.standard_normal((n, h * w))
    labels = np.repeat(np.array([0, 1], dtype=np.uint8), n // 2)
    data[labels == 1] += np.linspace(0.5, 1.5, h * w)
    return ImageStack(data, labels, h, w)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
