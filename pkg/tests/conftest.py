import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    n, title = crit
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    entry["ok"] &= report.passed
    entry["notes"].extend(getattr(report, "criterion_notes", []))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = tuple(mark.args)
        report.criterion_notes = list(getattr(item, "criterion_notes", []))


@pytest.fixture
def note(request):
    """Record a measured value to print next to the criterion's verdict."""
    request.node.criterion_notes = []

    def add(msg):
        request.node.criterion_notes.append(str(msg))

    return add


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        c = _CRITERIA[n]
        verdict = "PASS" if c["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}  {c['title']}")
        for msg in c["notes"]:
            terminalreporter.write_line(f"    {msg}")
