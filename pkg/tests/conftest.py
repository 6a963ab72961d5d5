"""Shared fixtures.

The five-level convergence study is the expensive part of the suite, so it
runs once per session and every consumer reads the same report.  Acceptance
tests record one verdict line per criterion; the lines are replayed in the
terminal summary so the full pass/fail table is visible in one place.
"""

import time
from dataclasses import dataclass

import pytest

from dbc.manufactured import StudyReport, bump_case, run_study

STUDY_LEVELS = [(4, 4), (8, 6), (16, 12), (32, 23), (64, 46)]

_CRITERIA: list = []


@dataclass
class StudyRun:
    report: StudyReport
    seconds: float


@pytest.fixture(scope="session")
def study():
    """The full benchmark study on the standard level sequence, timed."""
    start = time.perf_counter()
    report = run_study(STUDY_LEVELS, bump_case())
    seconds = time.perf_counter() - start
    assert report.failure is None, f"study failed: {report.failure}"
    assert len(report.records) == len(STUDY_LEVELS)
    return StudyRun(report=report, seconds=seconds)


@pytest.fixture(scope="session")
def criterion():
    """Record a one-line verdict for an acceptance criterion, then assert it.

    The line is appended before the assert so failing criteria still show up
    in the summary table.
    """

    def record(name, passed, detail):
        status = "PASS" if passed else "FAIL"
        _CRITERIA.append(f"{status}  criterion {name}: {detail}")
        assert passed, f"criterion {name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
