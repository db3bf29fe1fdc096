import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line per test; ``check(ok, detail)`` prints it and asserts."""

    def check(ok: bool, detail: str = ""):
        line = f"criterion {request.node.name}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        print(line)
        _ACCEPTANCE.append(line)
        assert ok, detail

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
