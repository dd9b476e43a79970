"""Shared pytest plumbing: one summary line per acceptance criterion."""

import pytest

_VERDICTS: dict = {}


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records the outcome of acceptance criterion ``n``."""

    def record(n: int, ok: bool, detail: str):
        _VERDICTS[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
