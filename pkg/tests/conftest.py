import hypothesis
import numpy as np
import pytest

from stockpot.tensor_store import Checkpoint

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("ci")


def scalars(**values):
    return Checkpoint.from_arrays({k: np.float64(v) for k, v in values.items()})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per exit criterion, filled in by test_acceptance.py
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("exit criteria")
    for key in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[key])
