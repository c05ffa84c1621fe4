"""Shared pytest plumbing for the acceptance gate's verdict lines.

Acceptance tests append one line per criterion to the session list below;
echoing them from pytest_terminal_summary keeps the verdicts visible even
though pytest captures stdout of passing tests.
"""

import pytest

_VERDICTS = []


@pytest.fixture(scope="session")
def verdicts():
    return _VERDICTS


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _VERDICTS:
        terminalreporter.write_sep("-", "acceptance verdicts")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
