import re

import pytest

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
_DETAILS = {}
_RESULTS = {}


@pytest.fixture
def criterion(request):
    """Record a one-line detail for the acceptance criterion of the running test."""
    cid = re.match(r"test_(A\d+)_", request.node.name).group(1)

    def note(detail):
        _DETAILS[cid] = detail
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_(A\d+)_", item.name)
    if m and rep.when == "call":
        _RESULTS[m.group(1)] = rep.passed
    elif m and rep.when == "setup" and rep.failed:
        _RESULTS[m.group(1)] = False


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for cid in sorted(_RESULTS, key=lambda c: int(c[1:])):
        status = "PASS" if _RESULTS[cid] else "FAIL"
        terminalreporter.write_line(f"{cid} {status}  {_DETAILS.get(cid, '')}")
