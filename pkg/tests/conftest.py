import pytest

_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """``record(key, ok, detail)``; lines are printed in the terminal summary."""
    def record(key: str, ok: bool, detail: str):
        _ACCEPTANCE[key] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
