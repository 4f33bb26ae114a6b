import pytest

_LINES = []


@pytest.fixture(scope="session")
def criterion_log():
    """Append ``(number, passed, text)``; printed at the end of the session."""
    return _LINES


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, text in sorted(_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {num:>2}: {text}")
