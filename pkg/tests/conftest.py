"""Prints one status line per acceptance criterion at the end of the run.

Each acceptance test records its line via record_property("criterion", ...)
once all assertions have passed; a test that fails never reaches that call,
so the summary falls back to a [FAIL] line built from the test name.
"""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" not in nodeid or getattr(rep, "when", "call") != "call":
                continue
            recorded = dict(getattr(rep, "user_properties", ())).get("criterion")
            if recorded is not None and status == "passed":
                lines[nodeid] = recorded
            else:
                name = nodeid.split("::")[-1]
                lines[nodeid] = f"[FAIL] {name}"
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for nodeid in sorted(lines):
            terminalreporter.write_line(lines[nodeid])
