"""Shared fixtures and the acceptance-criteria summary."""

import numpy as np
import pytest

from diffdepth import synthdata


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_dataset():
    """The default 64x64 dataset (64 train / 16 val / 16 test)."""
    return synthdata.generate_splits(seed=0)



# one "CRITERION n: PASS|FAIL ..." line per acceptance criterion, printed in
# the terminal summary so it survives pytest's output capture
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
