import pytest

# one line per acceptance criterion, replayed in the terminal summary
CRITERIA_LINES = {}


@pytest.fixture
def criterion():
    def report(number, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        CRITERIA_LINES[number] = line
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA_LINES):
        terminalreporter.write_line(CRITERIA_LINES[number])
