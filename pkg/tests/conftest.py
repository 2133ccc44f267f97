import pytest

_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdicts():
    """Collects one summary line per acceptance criterion."""
    return _VERDICTS


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
