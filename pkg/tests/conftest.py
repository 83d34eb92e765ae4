"""Acceptance reporting: one pass/fail line per ``criterion``-marked test."""

import pytest

_RESULTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.fixture
def detail(request):
    """Attach a short measured-value note to the acceptance line of this test."""

    def note(text):
        request.node.user_properties.append(("detail", str(text)))

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    failed_setup = report.when == "setup" and not report.passed
    if report.when == "call" or failed_setup:
        notes = [v for k, v in item.user_properties if k == "detail"]
        _RESULTS.append((str(mark.args[0]), mark.args[1], report.passed, "; ".join(notes), report.duration))


def _key(row):
    head = row[0].rstrip("abcdefgh")
    return int(head), row[0]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, notes, duration in sorted(_RESULTS, key=_key):
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] criterion {number}: {title} ({duration:.1f}s)"
        if notes:
            line += f" | {notes}"
        terminalreporter.write_line(line)
