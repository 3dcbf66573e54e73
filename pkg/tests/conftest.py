"""Collects acceptance-criterion outcomes and prints one line per criterion."""
from __future__ import annotations

import pytest

_OUTCOMES: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _OUTCOMES.setdefault(number, {"title": title, "status": "PASS", "detail": ""})
    if report.failed:
        entry["status"] = "FAIL"
        entry["detail"] = item.name
    elif report.skipped and entry["status"] == "PASS" and report.when in ("setup", "call"):
        entry["status"] = "SKIP"
        reason = report.longrepr[-1] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        entry["detail"] = str(reason).removeprefix("Skipped: ")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        e = _OUTCOMES[number]
        line = f"AC{number:<2} {e['status']:<4} {e['title']}"
        if e["detail"] and e["status"] != "PASS":
            line += f"  ({e['detail']})"
        terminalreporter.write_line(line)
