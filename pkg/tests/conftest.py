import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Record one acceptance verdict line; printed in the terminal summary."""
    def _record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append((number, f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"))
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
