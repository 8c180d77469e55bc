"""Shared pytest hooks: collect acceptance verdicts into the final summary."""

import re
import sys

_skip_lines = []


def pytest_runtest_logreport(report):
    # a skipped acceptance criterion still gets its one-line verdict
    if report.skipped and "test_criterion_" in report.nodeid:
        num = re.search(r"test_criterion_(\d+)", report.nodeid).group(1)
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
        reason = re.sub(r"^Skipped:\s*", "", str(reason)).replace("\n", " ")
        _skip_lines.append(f"criterion {num}: SKIP - {reason}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    lines = list(getattr(mod, "VERDICTS", ())) + _skip_lines
    if not lines:
        return
    lines.sort(key=lambda s: int(re.search(r"criterion (\d+)", s).group(1)))
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
