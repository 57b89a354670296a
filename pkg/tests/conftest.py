"""Shared pytest wiring for the test suite."""

# verdict lines collected by the acceptance gate; emitted after the run so
# they survive output capture
ACCEPTANCE_VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance gate")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)
