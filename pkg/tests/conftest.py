import pytest

# criterion number -> (all passed, notes)
RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


@pytest.fixture
def notes(request):
    """Free-form measurements shown next to the criterion's pass/fail line."""
    out = []
    request.node.acceptance_notes = out
    return out


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    ok, prev = RESULTS.get(mark.args[0], (True, []))
    RESULTS[mark.args[0]] = (ok and rep.passed, prev + getattr(item, "acceptance_notes", []))


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, notes = RESULTS[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        if notes:
            line += "  (" + "; ".join(notes) + ")"
        terminalreporter.write_line(line)
