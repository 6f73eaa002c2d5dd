"""Collects one PASS/FAIL line per acceptance criterion and prints them after the run.

Tests opt in with ``@pytest.mark.acceptance(criterion=N)``; a criterion passes
only if every test carrying its number passes. Details recorded with
``record_property("detail", ...)`` are appended to the line.
"""

import pytest

_RESULTS: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or "criterion" not in marker.kwargs:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        ok = rep.passed
        details = [str(v) for k, v in item.user_properties if k == "detail"]
        if not ok and rep.longrepr is not None:
            msg = getattr(rep.longrepr, "reprcrash", None)
            details.append(msg.message.splitlines()[0] if msg is not None else "error")
        entry = _RESULTS.setdefault(marker.kwargs["criterion"], [True, []])
        entry[0] = entry[0] and ok
        entry[1].append(f"{item.name}: {'; '.join(details) or ('ok' if ok else 'failed')}")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_RESULTS):
        ok, lines = _RESULTS[crit]
        terminalreporter.write_line(f"criterion {crit:>2}: {'PASS' if ok else 'FAIL'} | " + " | ".join(lines))
