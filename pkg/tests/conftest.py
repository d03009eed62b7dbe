"""Shared pytest hooks: per-criterion summary lines for the acceptance suite."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod else None
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num, desc, ok, detail in sorted(results):
        status = "PASS" if ok else "FAIL"
        line = f"[criterion {num:02d}] {status} {desc}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)
