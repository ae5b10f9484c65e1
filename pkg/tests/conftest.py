import re

import numpy as np
import pytest

_acceptance_outcomes = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_", report.nodeid)
    if m and (report.when == "call" or report.failed):
        _acceptance_outcomes.setdefault(int(m.group(1)), report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_outcomes:
        return
    from test_acceptance import RESULTS
    recorded = {int(re.search(r"criterion\s+(\d+)", line).group(1)): line for line in RESULTS}
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance_outcomes):
        line = recorded.get(n) or f"criterion {n:2d}: FAIL  raised before reporting"
        terminalreporter.write_line(line)
