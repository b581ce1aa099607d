"""Collects acceptance outcomes and prints one line per criterion."""

from collections import OrderedDict

import pytest

_OUTCOMES = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    entry = _OUTCOMES.setdefault(number, {"title": title, "failed": [], "passed": 0, "details": []})
    if report.failed:
        entry["failed"].append(item.name)
    elif report.when == "call":
        if report.skipped:
            entry["failed"].append(item.name + " (skipped)")
        else:
            entry["passed"] += 1
    entry["details"] += [v for k, v in item.user_properties if k == "detail" and v not in entry["details"]]


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        entry = _OUTCOMES[number]
        status = "FAIL" if entry["failed"] else "PASS"
        line = f"[{status}] criterion {number}: {entry['title']}"
        if entry["failed"]:
            line += f" (failed: {', '.join(entry['failed'])})"
        terminalreporter.write_line(line)
        for detail in entry["details"]:
            terminalreporter.write_line(f"         {detail}")
