from collections import OrderedDict

import pytest

# criterion number -> list of (name, ok, detail)
_RESULTS: "OrderedDict[int, list]" = OrderedDict()


@pytest.fixture
def report():
    """Record one sub-check of an acceptance criterion; returns ``ok``."""

    def _record(number: int, name: str, ok: bool, detail: str) -> bool:
        _RESULTS.setdefault(number, []).append((name, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {number}. {name}: {detail}")
        return bool(ok)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        checks = _RESULTS[number]
        ok = all(c[1] for c in checks)
        detail = "; ".join(f"{name}: {d}" for name, _, d in checks)
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
