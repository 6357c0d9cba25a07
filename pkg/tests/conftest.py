import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one line per acceptance criterion for the end-of-run summary."""
    results = request.config.stash.setdefault(_RESULTS, [])

    def record(number: int, name: str, ok: bool, detail: str = "") -> bool:
        results.append((number, name, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(results):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:2d} {name}: {detail}")
