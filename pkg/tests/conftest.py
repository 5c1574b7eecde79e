import sys


def pytest_terminal_summary(terminalreporter):
    """Re-emit the acceptance verdict lines so they survive output capture."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
