import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion verdicts recorded by test_acceptance.py, echoed in the terminal summary
VERDICTS: list = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
