import sys
from pathlib import Path

from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("pkg", deadline=None, max_examples=30)
settings.load_profile("pkg")


def pytest_terminal_summary(terminalreporter):
    import acceptance_report
    if acceptance_report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_report.LINES:
            terminalreporter.write_line(line)
