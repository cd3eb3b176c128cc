import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def _line(number: int, title: str, ok: bool, detail: str) -> str:
    return f"criterion {number:>2}  {'PASS' if ok else 'FAIL'}  {title}: {detail}"


@pytest.fixture
def verdict(request):
    """Record and assert one acceptance criterion: ``verdict(ok, detail)``."""
    number, title = request.node.get_closest_marker("criterion").args

    def record(ok: bool, detail: str) -> None:
        line = _line(number, title, ok, detail)
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call" and report.failed:
        number, title = marker.args
        if number not in ACCEPTANCE_LINES or "PASS" in ACCEPTANCE_LINES[number]:
            message = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
            ACCEPTANCE_LINES[number] = _line(number, title, False, message)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
