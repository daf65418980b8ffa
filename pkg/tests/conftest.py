"""Shared pytest hooks: a one-line verdict per release-gate test."""

GATE_FILE = "test_acceptance.py"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for key, flag in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for rep in terminalreporter.stats.get(key, []):
            nodeid = str(getattr(rep, "nodeid", ""))
            if GATE_FILE not in nodeid or "::" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            if verdicts.get(name) != "FAIL":
                verdicts[name] = flag
    if not verdicts:
        return
    terminalreporter.write_sep("-", "release gate")
    width = max(len(name) for name in verdicts)
    for name, flag in verdicts.items():
        terminalreporter.write_line("  {}  {}".format(name.ljust(width), flag))
