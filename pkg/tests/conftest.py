import pytest

_verdicts: dict[str, tuple[str, str]] = {}


@pytest.fixture
def verdict(request):
    """Record a one-line acceptance verdict; the test's own outcome decides PASS/FAIL."""
    key = request.node.nodeid
    _verdicts[key] = (request.node.name, "")

    def note(detail: str) -> None:
        _verdicts[key] = (request.node.name, detail)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.nodeid in _verdicts and (report.when == "call" or report.failed):
        name, detail = _verdicts[item.nodeid]
        status = "PASS" if report.passed else "FAIL"
        if report.failed and not detail:
            detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
        _verdicts[item.nodeid] = (name, f"{status}: {detail}")


def pytest_terminal_summary(terminalreporter):
    lines = [(n, d) for n, d in _verdicts.values() if d.startswith(("PASS", "FAIL"))]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, detail in lines:
        status, _, rest = detail.partition(": ")
        terminalreporter.write_line(f"{status} {name}: {rest}")
