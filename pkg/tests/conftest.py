"""Shared pytest hooks: surface acceptance verdicts after capture ends."""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance gate")
    for line in VERDICTS:
        terminalreporter.write_line(line)
