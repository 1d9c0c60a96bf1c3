"""Collects one verdict line per acceptance criterion and prints them at the end of the run."""
import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    def record(number, ok, detail):
        VERDICTS[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
