"""Collects acceptance outcomes and prints one line per criterion."""

import pytest

_OUTCOMES = {}


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
    detail = getattr(item, "criterion_detail", "")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if report.skipped:
            status = "SKIP"
            if hasattr(report, "wasxfail"):
                status = "XFAIL"
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else getattr(report, "wasxfail", "")
            detail = detail or str(reason).removeprefix("Skipped: ")
        else:
            status = "PASS" if report.passed else "FAIL"
        _OUTCOMES[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        title, status, detail = _OUTCOMES[number]
        line = f"criterion {number:>2} {status:<5} {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
