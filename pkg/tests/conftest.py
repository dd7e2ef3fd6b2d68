"""Prints one verdict line per release gate after every run that includes
tests from test_acceptance.py."""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            if getattr(report, "when", "call") not in ("call", "setup"):
                continue
            name = nodeid.rsplit("::", 1)[-1]
            parts = name.split("_", 3)  # test, criterion, NN, label
            number = int(parts[2])
            label = parts[3].replace("_", " ") if len(parts) > 3 else name
            status = "PASS" if report.passed else "FAIL"
            if number not in verdicts or status == "FAIL":
                verdicts[number] = f"criterion {number:2d}: {status} — {label}"
    if verdicts:
        terminalreporter.write_sep("-", "acceptance criteria")
        for number in sorted(verdicts):
            terminalreporter.write_line(verdicts[number])
