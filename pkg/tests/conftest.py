"""Echo acceptance verdict records after the run, outside output capture."""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.VERDICT_LINES:
        terminalreporter.section("acceptance verdicts")
        for line in test_acceptance.VERDICT_LINES:
            terminalreporter.write_line(line)
