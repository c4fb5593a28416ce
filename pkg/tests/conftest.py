from pathlib import Path

import pytest
from hypothesis import settings

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


_criteria: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    number = int(report.nodeid.split("test_criterion_")[1][:2])
    if report.when == "call" or report.failed or report.skipped:
        if report.failed:
            _criteria[number] = "FAIL"
        elif report.skipped:
            _criteria.setdefault(number, "SKIP")
        elif report.when == "call":
            _criteria.setdefault(number, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        terminalreporter.write_line(f"criterion {number:2d} {_criteria[number]}: {CRITERIA[number]}")
