"""Shared pytest hooks.

The acceptance tests register a status per criterion; the terminal summary
hook prints one line per criterion even when pytest captures stdout.
"""
from __future__ import annotations

import pytest

_CRITERIA: dict[int, tuple[str, str]] = {}


def record_criterion(number: int, detail: str = "") -> None:
    """Mark a criterion as passed; called at the end of its test body."""
    _CRITERIA[number] = ("PASS", detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" or not item.name.startswith("test_criterion_"):
        return
    number = int(item.name.split("_")[2])
    if report.failed:
        last = report.longreprtext.strip().splitlines()
        _CRITERIA[number] = ("FAIL", last[-1][:160] if last else "")
    elif report.skipped:
        _CRITERIA[number] = ("SKIP", "")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(_CRITERIA):
        status, detail = _CRITERIA[number]
        suffix = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(f"criterion {number}: {status}{suffix}")
