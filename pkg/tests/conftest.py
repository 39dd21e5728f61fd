"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end of the run."""

import pytest

VERDICTS: dict[int, str] = {}


def _line(n, ok, detail):
    return f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records and prints the line, then returns ``ok``."""
    def record(n, ok, detail):
        VERDICTS[n] = _line(n, bool(ok), detail)
        print(VERDICTS[n])
        return bool(ok)
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    n = marker.args[0]
    if report.failed and n not in VERDICTS:
        VERDICTS[n] = _line(n, False, f"errored ({call.excinfo.typename}: {call.excinfo.value})")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
