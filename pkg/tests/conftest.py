import pytest

VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {request.node.name}: {detail}"
        print(line, flush=True)
        VERDICTS[request.node.nodeid] = line
        assert ok, line

    return record


def pytest_runtest_logreport(report):
    # a criterion that crashed before reaching its verdict still gets a line
    if report.when == "call" and report.failed and "test_acceptance" in report.nodeid:
        VERDICTS.setdefault(report.nodeid, f"FAIL {report.nodeid.split('::')[-1]}: raised before verdict")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS.values():
            terminalreporter.write_line(line)
