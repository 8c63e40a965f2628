"""Shared test hooks.

Acceptance tests carry ``@pytest.mark.criterion(n, title)``. Each one may call
the ``criterion_detail`` fixture with a short measurement string; at the end
of the session one PASS/FAIL line per criterion is printed, whatever the
outcome of the test body.
"""

import pytest

_RESULTS = {}
_DETAILS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def criterion_detail(request):
    def note(text):
        _DETAILS.setdefault(request.node.nodeid, []).append(str(text))
        print(text)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        previous = _RESULTS.get(number)
        ok = not failed and (previous is None or previous[1])
        _RESULTS[number] = (title, ok, item.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, nodeid = _RESULTS[number]
        detail = "; ".join(_DETAILS.get(nodeid, []))
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number} {status}: {title}"
                                    + (f" ({detail})" if detail else ""))
