import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one acceptance line, print it, then fail the test if the criterion failed."""
    def record(k, ok, detail):
        line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[k] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[k])
