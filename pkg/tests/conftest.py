import sys
from pathlib import Path

# Make sibling test modules (oracles, helpers) importable regardless of cwd.
sys.path.insert(0, str(Path(__file__).parent))

# Lines appended by the acceptance tests; echoed after the run so they are
# visible even though pytest captures per-test stdout.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
