from collections import defaultdict

import pytest

# criterion number -> (title, [(passed, detail), ...])
_RESULTS = defaultdict(lambda: ["", []])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # record the call phase, or a setup failure that prevented it
    if report.when == "call" or (report.when == "setup" and not report.passed):
        number, title = marker.args
        detail = ", ".join(f"{k}={v}" for k, v in item.user_properties)
        _RESULTS[number][0] = title
        _RESULTS[number][1].append((report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, outcomes = _RESULTS[number]
        ok = all(passed for passed, _ in outcomes)
        detail = "; ".join(d for _, d in outcomes if d)
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
