from collections import defaultdict

import pytest

_RESULTS = defaultdict(list)


@pytest.fixture
def record():
    """``record(criterion, part, ok, detail)`` for the acceptance summary."""
    def _record(criterion, part, ok, detail):
        _RESULTS[criterion].append((part, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} criterion {criterion} [{part}]: {detail}")
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        parts = _RESULTS[n]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{part}: {'ok' if good else 'FAILED'} ({d})" for part, good, d in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
