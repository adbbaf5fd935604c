import sys
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, tuple[bool, str]] = {}


class Outcome:
    def __init__(self):
        self.ok = False
        self.detail = ""

    def set(self, ok: bool, detail: str) -> None:
        self.ok, self.detail = bool(ok), detail


@contextmanager
def _record(n: int):
    out = Outcome()
    try:
        yield out
    except Exception as exc:
        if not out.detail:
            out.detail = f"{type(exc).__name__}: {exc}"
        out.ok = False
        raise
    finally:
        _CRITERIA[n] = (out.ok, out.detail)
        print(f"criterion {n}: {'PASS' if out.ok else 'FAIL'} {out.detail}")


@pytest.fixture
def criterion():
    """``with criterion(n) as c: ...; c.set(ok, detail)`` records one acceptance line."""
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
