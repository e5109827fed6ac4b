import pytest

ACCEPTANCE: dict = {}
N_CRITERIA = 10


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records the outcome line for acceptance criterion ``n``."""

    def record(n, ok, detail=""):
        ACCEPTANCE[n] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    ran = any(r.nodeid.startswith("tests/test_acceptance.py") or "test_acceptance.py" in r.nodeid
              for key in ("passed", "failed", "error") for r in terminalreporter.stats.get(key, []))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  (not evaluated)")
