"""Shared test plumbing: one visible pass/fail line per acceptance criterion."""

import re

_CRIT = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    seen = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            m = _CRIT.search(getattr(rep, "nodeid", ""))
            if not m:
                continue
            num = int(m.group(1))
            label = m.group(2).replace("_", " ")
            verdict = "PASS" if status == "passed" else "FAIL"
            # keep the worst verdict if a criterion somehow reports twice
            if seen.get(num, (None, "PASS"))[1] != "FAIL":
                seen[num] = (label, verdict)
    if not seen:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(seen):
        label, verdict = seen[num]
        terminalreporter.write_line(f"criterion {num:2d} [{label}]: {verdict}")
