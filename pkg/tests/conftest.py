"""Collects per-criterion outcomes of the acceptance suite and prints one line each."""
import time

import pytest

_results = {}
_titles = {}
_elapsed = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    yield
    m = item.get_closest_marker("criterion")
    if m:
        _elapsed[m.args[0]] = _elapsed.get(m.args[0], 0.0) + time.perf_counter() - start


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = getattr(report, "_criterion", None)
    if crit is None:
        return
    n, title = crit
    _titles[n] = title
    _results[n] = _results.get(n, True) and report.outcome == "passed"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m:
        outcome.get_result()._criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        verdict = "PASS" if _results[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}  {_titles[n]}  ({_elapsed.get(n, 0.0):.1f}s)")
