import numpy as np
import pytest

from tubempc.manipulator import ManipulatorParams, initial_state, paper_initial_theta

_ACCEPTANCE_LINES = []


@pytest.fixture
def params():
    return ManipulatorParams.paper()


@pytest.fixture
def z0(params):
    return initial_state(paper_initial_theta(), params)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion():
    """``criterion(n, ok, text)`` prints one verdict line and records it for the summary."""

    def _report(n: int, ok: bool, text: str):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}"
        print(line)
        _ACCEPTANCE_LINES.append((n, line))
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
