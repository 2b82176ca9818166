import pytest

from helpers import ACCEPTANCE_LINES
from needletrack.synth import ScanPattern


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def pattern():
    return ScanPattern.parallel()


@pytest.fixture
def center_plane(pattern):
    return pattern.planes[2]
