"""Shared pytest plumbing.

The acceptance tests record one verdict line per check; printing them from
pytest_terminal_summary keeps them visible even under output capture.
"""

_ACCEPTANCE_LINES: list[tuple[float, str]] = []


def record_acceptance(number: float, line: str) -> None:
    _ACCEPTANCE_LINES.append((number, line))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance checks")
    for _, line in sorted(_ACCEPTANCE_LINES, key=lambda item: item[0]):
        terminalreporter.write_line(line)
