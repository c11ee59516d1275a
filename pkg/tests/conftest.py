"""Collects the acceptance verdicts and prints them after the test session."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance_log.VERDICTS):
        terminalreporter.write_line(acceptance_log.format_line(number))
