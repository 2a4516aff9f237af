"""Collects outcomes of tests marked ``acceptance`` and prints one line per criterion."""
import time

import pytest

_RESULTS: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    entry = _RESULTS.setdefault(number, {"title": title, "passed": True, "seconds": 0.0, "detail": ""})
    if rep.when == "call":
        entry["seconds"] += rep.duration
    if rep.failed:
        entry["passed"] = False
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else str(rep.longrepr)
        entry["detail"] = msg.splitlines()[0][:160] if msg else ""
    elif rep.skipped and rep.when in ("setup", "call"):
        entry["passed"] = None


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        e = _RESULTS[number]
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[e["passed"]]
        line = f"criterion {number:2d}: {status}  {e['title']} ({e['seconds']:.1f} s)"
        if e["detail"] and e["passed"] is False:
            line += f"  [{e['detail']}]"
        tr.write_line(line)


@pytest.fixture
def stopwatch():
    """Returns a callable giving seconds elapsed since the test started."""
    t0 = time.perf_counter()
    return lambda: time.perf_counter() - t0
