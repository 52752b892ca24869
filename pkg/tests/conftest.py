import pytest

# criterion number -> (passed, detail), filled by the acceptance tests
ACCEPTANCE: dict = {}


@pytest.fixture
def report():
    def _report(num: int, ok: bool, detail: str):
        ACCEPTANCE[num] = (bool(ok), detail)
        assert ok, f"criterion {num}: {detail}"
    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
