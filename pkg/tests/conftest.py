import os
from collections import defaultdict

import pytest

# criterion id -> list of (outcome, detail)
_OUTCOMES: dict[str, list] = defaultdict(list)
_DETAILS: dict[str, list] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid): acceptance criterion the test belongs to")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("MEGA_SIM_EXTENDED") == "1":
        return
    skip = pytest.mark.skip(reason="long run; set MEGA_SIM_EXTENDED=1")
    for item in items:
        if "extended" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def report(request):
    """Attach a one-line measurement to the criterion of the running test."""
    mark = request.node.get_closest_marker("criterion")
    cid = mark.args[0] if mark else request.node.name

    def add(text):
        _DETAILS[cid].append(f"{request.node.name}: {text}")

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _OUTCOMES[mark.args[0]].append((rep.outcome, rep.nodeid))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(_OUTCOMES, key=lambda c: (int(c.split("-")[0]), c)):
        outs = [o for o, _ in _OUTCOMES[cid]]
        if "failed" in outs:
            verdict = "FAIL"
        elif all(o == "skipped" for o in outs):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        tr.write_line(f"criterion {cid}: {verdict} ({outs.count('passed')} passed, "
                      f"{outs.count('failed')} failed, {outs.count('skipped')} skipped)")
        for d in _DETAILS.get(cid, []):
            tr.write_line(f"    {d}")
