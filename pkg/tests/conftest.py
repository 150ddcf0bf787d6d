from __future__ import annotations


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print one pass/fail line per acceptance criterion at the end of a run."""
    rows = []
    for status in ("passed", "failed", "skipped"):
        for report in terminalreporter.stats.get(status, []):
            if "test_acceptance" in getattr(report, "nodeid", ""):
                rows.append((report.nodeid.split("::")[-1], status.upper()))
    if not rows:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, status in sorted(rows):
        terminalreporter.write_line(f"{status:<7} {name}")
