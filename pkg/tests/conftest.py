import pytest

_RESULTS: dict[str, list[str]] = {}
_DETAILS: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _RESULTS.setdefault(marker.args[0], []).append(report.outcome)
        _DETAILS.setdefault(marker.args[0], []).extend(report.capstdout.splitlines())


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_RESULTS):
        outcomes = _RESULTS[cid]
        verdict = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"{cid}: {verdict} ({len(outcomes)} check{'s' if len(outcomes) > 1 else ''})")
        for line in _DETAILS.get(cid, []):
            terminalreporter.write_line(f"    {line}")
