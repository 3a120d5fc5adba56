"""Shared fixtures, plus the verdict recorder used by the release gate.

Verdict lines collected during the run are printed in their own section
after the test summary, where pytest's output capture no longer hides
them.
"""

import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record a one-line PASS/FAIL verdict for the final summary, then
    enforce it."""

    def record(ok: bool, label: str) -> None:
        _VERDICTS.append(f"{'PASS' if ok else 'FAIL'} {label}")
        assert ok, label

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("release gate")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
