"""Acceptance bookkeeping: tests marked ``criterion(n)`` feed a per-criterion
pass/fail line printed at the end of the session."""

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

N_CRITERIA = 15
_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    n = marker.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    ok, notes = _outcomes.get(n, (True, []))
    ok = ok and rep.passed
    if rep.when == "call" and detail:
        notes.append(detail)
    if rep.failed:
        notes.append(f"{item.name} failed")
    _outcomes[n] = (ok, notes)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n not in _outcomes:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        ok, notes = _outcomes[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {' | '.join(notes)}")
