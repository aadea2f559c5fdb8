import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def report(capsys):
    """Print a PASS/FAIL line immediately and keep it for the run summary."""

    def emit(line):
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
