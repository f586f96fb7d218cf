import time

import pytest

# criterion number -> (passed, seconds, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for one acceptance criterion.

    Usage: ``with criterion(3, limit=120) as note: ...; note("detail")``.
    The block's assertion outcome and its runtime against ``limit`` decide the line.
    """

    class _Recorder:
        def __init__(self, number, limit):
            self.number, self.limit, self.detail = number, limit, ""

        def __call__(self, detail):
            self.detail = detail

        def __enter__(self):
            self.start = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            elapsed = time.perf_counter() - self.start
            ok = exc_type is None and elapsed < self.limit
            detail = self.detail
            if exc_type is not None:
                detail = f"{detail} {exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}".strip()
            elif elapsed >= self.limit:
                detail = f"{detail} runtime {elapsed:.1f}s over limit {self.limit}s".strip()
            ACCEPTANCE[self.number] = (ok, elapsed, detail)
            if exc_type is None and elapsed >= self.limit:
                pytest.fail(f"criterion {self.number} took {elapsed:.1f}s, limit {self.limit}s")
            return False

    return _Recorder


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, elapsed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s) {detail}")
