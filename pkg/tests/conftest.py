import sys
from pathlib import Path

import pytest
import torch

from dwpseg.numerics import set_single_threaded

sys.path.insert(0, str(Path(__file__).parent))

set_single_threaded()


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield torch.float64
    torch.set_default_dtype(prev)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def report(number: int, checks: dict[str, bool], detail: str = "") -> None:
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f" | {detail}"
        if failed:
            line += f" | failed: {', '.join(failed)}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
