import time

import pytest


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail)``, timed from fixture setup."""
    start = time.perf_counter()
    lines = request.config.stash.setdefault(_LINES, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        elapsed = time.perf_counter() - start
        lines[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}  [{elapsed:.1f}s]"
        print(lines[number])
        return passed

    return record


_LINES = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
