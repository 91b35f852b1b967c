import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from spgan.dataio import make_rng


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    with threadpool_limits(1):
        yield


@pytest.fixture
def rng():
    return make_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Call with (number, passed, detail); lines are echoed in the terminal summary."""

    def report(n: int, passed: bool, detail: str) -> None:
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
