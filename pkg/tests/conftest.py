import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from attrsae.domain import SaeModel  # noqa: E402

# Filled by test_acceptance.py; printed at the end of the run.
ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[key])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def identity_model(d: int, dtype=np.float64) -> SaeModel:
    eye = np.eye(d, dtype=dtype)
    return SaeModel(eye, np.zeros(d, dtype), eye.copy(), np.zeros(d, dtype))


@pytest.fixture
def small_model():
    # d=2, m=3 hand-checkable instance
    return SaeModel(
        W_enc=np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
        b_enc=np.zeros(3),
        W_dec=np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 1.0]]),
        b_pre=np.array([1.0, 0.0]),
    )
