from __future__ import annotations

import pytest

RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")
    config.stash[RESULTS] = {}


@pytest.fixture
def detail(request):
    """Let an acceptance test attach its measured numbers to the summary line."""
    parts: list[str] = []
    request.node.stash[RESULTS] = parts
    return parts.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    number, title = marker.args
    parts = item.stash.get(RESULTS, [])
    item.config.stash[RESULTS][number] = (rep.passed, title, "; ".join(parts))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, title, text = results[number]
        line = f"{'PASS' if ok else 'FAIL'}  {number:>2}. {title}"
        terminalreporter.write_line(line + (f": {text}" if text else ""))
