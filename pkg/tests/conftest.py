import sys

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0xB0B)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines):
            terminalreporter.write_line(line)
