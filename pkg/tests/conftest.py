import numpy as np
import pytest

from implab.data import normalize, synthetic_dataset
from implab.models import build_mlp

# Lines appended by the acceptance module; echoed at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def blobs():
    ds = synthetic_dataset({"kind": "gaussian_blobs", "classes": 3, "per_class": 60, "dims": 4,
                            "separation": 4.0, "seed": 3})
    return normalize(ds)


@pytest.fixture(scope="session")
def small_mlp(blobs):
    return build_mlp([4, 8, 3], seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
