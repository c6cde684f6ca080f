"""Shared pytest wiring.

The acceptance tests append one verdict line each; printing them after the
run keeps the checklist visible even though pytest captures test output at
the file-descriptor level.
"""

acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance checklist")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
