from pathlib import Path

import numpy as np
import pytest

from sealbench.imaging import load_image

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def astronaut():
    return load_image(DATA / "astronaut.png")


@pytest.fixture(scope="session")
def small_natural(astronaut):
    """A 64x64 natural patch (uint8)."""
    import cv2

    return cv2.resize(astronaut, (64, 64), interpolation=cv2.INTER_AREA)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
