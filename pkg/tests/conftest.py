import pytest

_CRITERIA_LINES = []


@pytest.fixture(scope="session")
def criteria_report():
    """Accumulates one line per acceptance criterion for the summary."""
    return _CRITERIA_LINES


def _criterion_number(line):
    try:
        return int(line.split("]")[0].split()[-1])
    except (IndexError, ValueError):
        return 99


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_CRITERIA_LINES, key=_criterion_number):
        terminalreporter.line(line)
