import pytest

# acceptance verdicts, printed once at the end of the session
VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    def record(criterion: int, ok: bool, detail: str):
        VERDICTS[criterion] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        ok, detail = VERDICTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
