import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from armedforest.sim import Model8Params, simulate_model8  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_model8():
    rng = np.random.default_rng(7)
    params = Model8Params.beta_setting("3alpha/4")
    return simulate_model8(2000, params, rng), simulate_model8(2000, params, rng)


# One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
