import pytest

_ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record an acceptance verdict; it is printed in the terminal summary."""

    def record(criterion, passed, detail):
        _ACCEPTANCE[criterion] = (bool(passed), detail)
        line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
