"""Per-criterion pass/fail summary for the acceptance suite."""
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
    if marker is None or (report.when != "call" and not report.failed):
        return
    number, title = marker.args
    entry = _OUTCOMES.setdefault(number, {"title": title, "failed": [], "passed": 0, "details": []})
    if report.failed:
        entry["failed"].append(item.name)
    elif report.when == "call":
        entry["passed"] += 1
    entry["details"].extend(v for k, v in item.user_properties if k == "detail" and v not in entry["details"])


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        e = _OUTCOMES[number]
        status = "FAIL" if e["failed"] else "PASS"
        line = f"criterion {number:>2} {status}  {e['title']}"
        if e["failed"]:
            line += f"  (failed: {', '.join(e['failed'])})"
        terminalreporter.write_line(line)
        for d in e["details"]:
            terminalreporter.write_line(f"             {d}")
