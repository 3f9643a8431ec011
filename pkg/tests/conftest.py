import _acceptance_report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _acceptance_report.lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_report.lines:
            terminalreporter.write_line(line)
