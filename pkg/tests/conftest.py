import numpy as np
import pytest

from dscsma.core import FrameTimings

EQ1 = np.array([
    [0, 1, 0, 1, 1],
    [1, 0, 1, 1, 1],
    [0, 1, 0, 1, 1],
    [1, 1, 1, 0, 0],
    [1, 1, 1, 0, 0],
])


@pytest.fixture
def eq1():
    return EQ1.copy()


@pytest.fixture
def timings():
    return FrameTimings()
