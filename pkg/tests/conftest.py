import contextlib

import pytest

_ACCEPTANCE: dict[int, str] = {}


class _Criterion:
    def __init__(self):
        self.detail = ""


@contextlib.contextmanager
def _criterion(number: int, name: str):
    c = _Criterion()
    try:
        yield c
    except BaseException as exc:
        msg = " ".join(str(exc).split())[:160]
        _ACCEPTANCE[number] = f"criterion {number:2d} FAIL  {name}: {c.detail} {msg}".rstrip()
        raise
    _ACCEPTANCE[number] = f"criterion {number:2d} PASS  {name}: {c.detail}".rstrip()


@pytest.fixture
def criterion():
    """``with criterion(n, name) as c: ...; c.detail = ...`` records one pass/fail line."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
