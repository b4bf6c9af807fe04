import numpy as np
import pytest

from prepguard import data as D
from prepguard import model as M

MODEL_SEED = 7

# Acceptance lines collected by tests/test_acceptance.py and echoed in the summary.
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def split():
    return D.synth_split(MODEL_SEED)


@pytest.fixture(scope="session")
def trained(split):
    train, _ = split
    return M.train(train.images, train.labels, M.TrainConfig(seed=MODEL_SEED), num_classes=train.num_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
