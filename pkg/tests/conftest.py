import numpy as np
import pytest

from robust_saliency.data import load_digits_split
from robust_saliency.nn import TrainConfig, init_model, train

ACCEPTANCE_LINES = []


def record(criterion: int, name: str, passed: bool, detail: str) -> None:
    """Remember one acceptance outcome for the terminal summary."""
    status = "PASS" if passed else "FAIL"
    line = f"criterion {criterion} [{status}] {name}: {detail}"
    ACCEPTANCE_LINES.append((criterion, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def digits():
    return load_digits_split()


@pytest.fixture(scope="session")
def digits_model(digits):
    train_set, _ = digits
    model, _ = train(init_model(seed=0), train_set.inputs, train_set.labels, TrainConfig(seed=0))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
