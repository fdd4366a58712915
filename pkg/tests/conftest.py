"""Collects acceptance-criterion outcomes and prints one line per criterion
at the end of the run."""

from collections import defaultdict

_outcomes = defaultdict(list)


def pytest_runtest_logreport(report):
    n = dict(report.user_properties).get("criterion")
    if n is None:
        return
    if report.when == "call" or report.failed or report.skipped:
        detail = dict(report.user_properties).get("detail", "")
        _outcomes[n].append((report.nodeid.split("::")[-1], report.outcome, report.duration, detail))


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", mark.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        parts = _outcomes[n]
        ok = all(outcome == "passed" for _, outcome, _, _ in parts)
        secs = sum(d for _, _, d, _ in parts)
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} ({secs:.1f}s)")
        for name, outcome, d, detail in parts:
            tr.write_line(f"    {outcome:7s} {name}: {detail}")
