"""Shared pytest plumbing: collects per-criterion verdict lines from the
acceptance suite and echoes them in the terminal summary so every run shows
one pass/fail line per criterion."""

from typing import List

ACCEPTANCE_LINES: List[str] = []


def record_verdict(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
