"""Collects acceptance-criterion outcomes and prints one line per criterion
at the end of the run (see test_acceptance.py; one test == one criterion)."""

import re

_PATTERN = re.compile(r"test_criterion_(\d+)_(\w+)")
_results: dict[str, str] = {}


def pytest_runtest_logreport(report):
    match = _PATTERN.search(report.nodeid)
    if match is None:
        return
    key = f"{int(match.group(1)):02d} {match.group(2).replace('_', ' ')}"
    if report.when == "call":
        _results[key] = report.outcome
    elif report.when == "setup" and report.outcome != "passed":
        _results[key] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_results):
        status = {"passed": "PASS", "failed": "FAIL"}.get(_results[key],
                                                          _results[key].upper())
        terminalreporter.write_line(f"criterion {key}: {status}")
