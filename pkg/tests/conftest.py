"""Pytest hooks: one PASS/FAIL line per acceptance criterion at the end of the run."""

import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _results.setdefault(number, {"title": title, "status": "PASS", "seconds": 0.0})
    if rep.failed:
        entry["status"] = "FAIL"
    elif rep.skipped and entry["status"] != "FAIL":
        entry["status"] = "SKIP"
    if rep.when == "call":
        entry["seconds"] += rep.duration


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        e = _results[number]
        terminalreporter.write_line(f"{e['status']}  criterion {number:2d}  {e['title']}  ({e['seconds']:.2f} s)")
