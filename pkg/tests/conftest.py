import pytest

_ACCEPTANCE: list = []


@pytest.fixture
def acceptance():
    """Record a criterion outcome; the summary is printed at the end of the session."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.append((number, ok, detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
