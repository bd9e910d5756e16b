"""Collects one pass/fail line per acceptance criterion and prints them after the run."""

import pytest

ACCEPTANCE = {}


def record(number, ok, detail, warn_only=False):
    ACCEPTANCE[number] = (ok, detail, warn_only)


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail, warn_only = ACCEPTANCE[number]
        status = "PASS" if ok else ("WARN" if warn_only else "FAIL")
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")
