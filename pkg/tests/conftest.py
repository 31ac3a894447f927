"""Shared pytest plumbing for the acceptance suite.

Acceptance tests register one summary line per criterion through
record_criterion; the hook below prints them all after the normal pytest
report so the outcome of every criterion is visible in one block even when
some of them fail.
"""

_RESULTS = []


def record_criterion(name, passed, detail):
    """Register one acceptance outcome for the end-of-run summary."""
    _RESULTS.append((str(name), bool(passed), str(detail)))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _RESULTS:
        tag = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{tag}] {name}: {detail}")
