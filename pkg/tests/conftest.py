"""Replays the per-criterion verdict lines from the acceptance module after
the normal pytest summary, where output capture cannot swallow them."""

_criterion_lines: list[str] = []


def record_criterion(line: str):
    _criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)
