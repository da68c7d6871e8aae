"""Suite-wide reporting hook.

The acceptance tests each register one verdict line; printing them from a
terminal-summary section keeps them visible even though pytest captures
stdout of passing tests.
"""

_verdicts: list[tuple[int, str]] = []


def record_verdict(order: int, line: str) -> None:
    _verdicts.append((order, line))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_verdicts):
        terminalreporter.write_line(line)
