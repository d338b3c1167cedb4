import pytest

# acceptance outcomes, filled by tests/test_acceptance.py: {n: (passed, detail)}
ACCEPTANCE = {}
N_CRITERIA = 10


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE and not _acceptance_selected(terminalreporter):
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  not evaluated (error or deselected)")


def _acceptance_selected(reporter):
    stats = reporter.stats
    for key in ("passed", "failed", "error", "skipped"):
        for rep in stats.get(key, []):
            if "test_acceptance" in getattr(rep, "nodeid", ""):
                return True
    return False


@pytest.fixture(scope="session")
def record():
    def _record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return _record
